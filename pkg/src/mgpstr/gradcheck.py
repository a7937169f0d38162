"""Central finite-difference oracles for the tape's analytic gradients.

Both sides are evaluated in float64.  The numeric side only ever calls the
forward function on perturbed copies of the inputs, so it shares nothing with
the backward rules under test.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, default_dtype


def rel_error(a, b, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)``.

    The floor sits above float64 central-difference noise (1e-11 or so at
    h=1e-4) so gradients that are exactly zero by symmetry (a key bias under
    softmax, say) do not read as large relative errors.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             h: float = 1e-3) -> list[float]:
    """Relative error of every input's gradient for ``sum(w * fn(*inputs))``.

    ``w`` is a fixed random weighting so that non-scalar outputs are
    checked in every component, not just along the all-ones direction.
    Returns one relative error per input.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        # tensors share memory with arrays so numeric_grad's in-place edits are seen
        for t, a in zip(tensors, arrays):
            t.data = a
        probe = fn(*tensors)
        weights = Tensor(rng.standard_normal(probe.shape))

        def scalar() -> Tensor:
            return (fn(*tensors) * weights).sum()

        with Tape() as tape:
            loss = scalar()
        tape.backward(loss)
        errors = []
        for t, a in zip(tensors, arrays):
            num = numeric_grad(lambda: scalar().item(), a, h)
            errors.append(rel_error(t.grad, num))
    return errors


def check_directional(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], seed: int = 0,
                      h: float = 1e-3) -> dict[int, float]:
    """Per-tensor directional-derivative check for a scalar loss.

    For each tensor a random unit direction ``v`` is drawn and
    ``<grad, v>`` is compared with ``(f(p + h v) - f(p - h v)) / 2h``.
    Tensors must already be float64 and require grad.  Returns
    ``{position in params: relative error}``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    out = {}
    for i, p in enumerate(params):
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        analytic = float(np.sum((p.grad if p.grad is not None else 0.0) * v))
        orig = p.data.copy()
        p.data[...] = orig + h * v
        fp = loss_fn().item()
        p.data[...] = orig - h * v
        fm = loss_fn().item()
        p.data[...] = orig
        numeric = (fp - fm) / (2 * h)
        out[i] = rel_error(analytic, numeric)
    return out
