"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its output with numpy, then (when a
:class:`Tape` is active and some input requires a gradient) appends a
:class:`TapeEntry` holding the input refs, the output ref, and a closure over
whatever intermediates the backward rule needs.  :meth:`Tape.backward` walks
those entries in reverse.

Values are float32 unless :func:`default_dtype` says otherwise; gradient
checking runs in float64 so that finite-difference noise does not mask
formula errors.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DegenerateInputError, NonFiniteError, ShapeError

_DTYPE = np.float32
_TAPES: list["Tape"] = []


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def get_default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"tensor {name or ''} constructed with non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(".T is only defined for 2-D tensors")
        return transpose(self, (1, 0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# recording


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the ops executed while it is active.

    Usage::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves are tensors consumed by the tape but not produced by it.  Leaf
    gradients are added to any existing ``.grad`` so callers zero them
    between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    produced = {id(e.output) for e in tape.entries}
    seed = np.ones_like(loss.data)
    if id(loss) not in produced:
        _accumulate_leaf(loss, seed)
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for entry in reversed(tape.entries):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.backward(g)
        for t, gi in zip(entry.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"{entry.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
            key = id(t)
            if key in produced:
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    _check_finite(f"gradient of {t.name or 'leaf'}", g)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_finite(op: str, arr: np.ndarray) -> None:
    # A finite sum implies finite entries; only fall back to the full scan if it is not.
    with np.errstate(over="ignore", invalid="ignore"):
        s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, bwd, check: bool = True) -> Tensor:
    # Linear and shape ops pass check=False: any overflow they produce is
    # caught by the next checked op (norm, softmax, gelu, loss) or leaf gradient.
    if check:
        _check_finite(op, data)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, rg)
    if rg and _TAPES:
        _TAPES[-1].entries.append(TapeEntry(op, inputs, out, bwd))
    return out


def no_grad_value(t: Tensor) -> Tensor:
    """A copy of ``t`` cut from the graph."""
    return Tensor._wrap(t.data.copy(), False)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or math.prod(a) == 1 or math.prod(b) == 1:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), check=False)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), check=False)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), check=False)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * g.dtype.type(c),), check=False)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# Abramowitz-Stegun 7.1.26: |erf error| < 1.5e-7, below float32 resolution near 1.
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)
# The same expansion written directly for the normal tail Q(|x|) = 1 - Phi(|x|).
_TAIL_P = np.float32(_AS_P * _SQRT1_2)
_TAIL_A = tuple(np.float32(0.5 * a) for a in reversed(_AS_A))


def _normal_parts32(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Phi(x), exp(-x*x/2)) for float32 ``x``."""
    gauss = x * x
    gauss *= np.float32(-0.5)
    np.exp(gauss, out=gauss)
    t = np.abs(x)
    t *= _TAIL_P
    t += np.float32(1.0)
    np.reciprocal(t, out=t)
    tail = t * _TAIL_A[0]
    for a in _TAIL_A[1:]:
        tail += a
        tail *= t
    tail *= gauss
    # Phi(x) = 1/2 + sign(x) * (1/2 - Q(|x|))
    cdf = np.subtract(np.float32(0.5), tail, out=tail)
    np.copysign(cdf, x, out=cdf)
    cdf += np.float32(0.5)
    return cdf, gauss


def normal_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF; float32 input takes the fast polynomial path."""
    if x.dtype == np.float32:
        return _normal_parts32(x)[0]
    return special.ndtr(x)


def gelu(x: Tensor) -> Tensor:
    """Exact ``x * Phi(x)``."""
    xd = x.data
    if xd.dtype == np.float32:
        cdf, gauss = _normal_parts32(xd)
    else:
        cdf = special.ndtr(xd)
        gauss = np.exp(-0.5 * xd * xd)
    y = xd * cdf

    def bwd(g):
        d = xd * gauss
        d *= xd.dtype.type(_INV_SQRT_2PI)
        d += cdf
        d *= g
        return (d,)

    return _emit("gelu", (x,), y, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes.  ``b`` is either 2-D (shared across the
    batch) or carries the same batch axes as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[1])

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            db = a2.T @ g2 if b.requires_grad else None
            return da, db

        return _emit("matmul", (a, b), out, bwd, check=False)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bbwd(g):
        da = np.matmul(g, bd.swapaxes(-1, -2)) if a.requires_grad else None
        db = np.matmul(ad.swapaxes(-1, -2), g) if b.requires_grad else None
        return da, db

    return _emit("bmm", (a, b), out, bbwd, check=False)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (``w`` is in x out)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    if b is not None and b.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for weight {wd.shape}")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(*xd.shape[:-1], wd.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        dw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, out, bwd, check=False)


# ---------------------------------------------------------------------------
# normalisation and reductions


def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax; ``mask`` (broadcastable bool, True keeps) zeroes entries."""
    axis = _axis(x.ndim, axis)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    y = np.subtract(z, z.max(axis=axis, keepdims=True))
    np.exp(y, out=y)
    y *= 1.0 / y.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = np.einsum("...i,...i->...", np.moveaxis(g, axis, -1), np.moveaxis(y, axis, -1))
        d = g - np.expand_dims(dot, axis)
        d *= y
        return (d,)

    return _emit("softmax", (x,), y, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), y, bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    axis = _axis(x.ndim, axis)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, xd.dtype.type(eps))
    y = xd / norm

    def bwd(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", (x,), y, bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), out, bwd, check=False)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions.

    ``logits`` has shape ``(..., K)``; ``targets`` is an int array of shape ``(...)``.
    """
    ld = logits.data
    k = ld.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != ld.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {tgt.shape} vs logits {ld.shape}")
    z = ld.reshape(-1, k)
    t = tgt.reshape(-1)
    valid = np.ones_like(t, dtype=bool) if ignore_id is None else t != ignore_id
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("cross_entropy: every target is ignored")
    tv = t[valid]
    if tv.min() < 0 or tv.max() >= k:
        raise ContractError(f"cross_entropy: target id outside [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    denom = p.sum(axis=1, keepdims=True)
    p /= denom
    rows = np.nonzero(valid)[0]
    logp_t = shifted[rows, tv] - np.log(denom[rows, 0])
    loss = np.asarray(-logp_t.sum() / n, dtype=ld.dtype)

    def bwd(g):
        d = p.copy()
        d[rows, tv] -= 1.0
        d[~valid] = 0.0
        d *= g / n
        return (d.reshape(ld.shape),)

    return _emit("cross_entropy", (logits,), loss, bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),), check=False)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),), check=False)


def index(x: Tensor, key) -> Tensor:
    """``x[key]`` for basic or integer-array indexing; repeated indices accumulate."""
    shape, dtype = x.shape, x.data.dtype
    out = np.array(x.data[key], copy=True)

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _emit("index", (x,), out, bwd, check=False)


def embedding(ids, table: Tensor) -> Tensor:
    """Rows of ``table`` (V x D) picked by the integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ContractError(f"embedding: id outside [0, {v})")
    out = table.data[ids]

    def bwd(g):
        flat = ids.reshape(-1)
        g2 = g.reshape(-1, d)
        full = np.zeros((v, d), dtype=g.dtype)
        for col in range(d):
            full[:, col] = np.bincount(flat, weights=g2[:, col], minlength=v)
        return (full,)

    return _emit("embedding", (table,), out, bwd, check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    axis = _axis(tensors[0].ndim, axis)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)), check=False)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); backward sums the copies."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit("expand", (x,), out, lambda g: (_unbroadcast(g, src),), check=False)
