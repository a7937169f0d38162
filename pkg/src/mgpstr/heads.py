"""A^3 aggregation modules, classification heads, greedy decoding and the joint loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .params import ModelParams
from .tensor import Tensor

BRANCHES = ("char", "bpe", "wp")


@dataclass
class Prediction:
    branch: str
    text: str
    token_ids: list[int]
    step_confidences: list[float] = field(default_factory=list)


def init_a3(params: ModelParams, prefix: str, dim: int, slots: int) -> None:
    params.create(f"{prefix}.ln_in.g", (dim,), "ones")
    params.create(f"{prefix}.ln_in.b", (dim,), "zeros")
    # LN_in outputs are unit scale, so 0.02 leaves every mask near uniform
    # and the slots never separate; dim**-0.5 gives O(1) logits at init.
    params.create(f"{prefix}.alpha", (slots, dim), std=dim ** -0.5)
    params.create(f"{prefix}.U", (dim, dim))
    params.create(f"{prefix}.ln_out.g", (dim,), "ones")
    params.create(f"{prefix}.ln_out.b", (dim,), "zeros")


def a3_forward(params: ModelParams, prefix: str, z: Tensor) -> tuple[Tensor, Tensor]:
    """Pool ``slots`` tokens out of ``z`` (B, S, D) with per-slot spatial softmax.

    The normalised sequence feeds both the mask logits and the value path.
    Returns ``(Y, masks)`` with shapes (B, slots, D) and (B, slots, S).
    """
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    alpha = p("alpha")
    if z.ndim != 3 or z.shape[-1] != alpha.shape[1]:
        raise ShapeError(f"A3 input {z.shape} does not match alpha {alpha.shape}")
    zn = T.layer_norm(z, p("ln_in.g"), p("ln_in.b"))
    logits = T.matmul(zn, T.transpose(alpha, (1, 0)))           # (B, S, slots)
    masks = T.transpose(T.softmax(logits, axis=1), (0, 2, 1))   # (B, slots, S)
    values = T.matmul(zn, p("U"))
    y = T.matmul(masks, values)
    return T.layer_norm(y, p("ln_out.g"), p("ln_out.b")), masks


def init_head(params: ModelParams, prefix: str, dim: int, num_classes: int) -> None:
    params.create(f"{prefix}.W", (num_classes, dim))


def classify(y: Tensor, head: Tensor) -> Tensor:
    """Logits ``Y W^T``; ``head`` is (K, D)."""
    if y.shape[-1] != head.shape[1]:
        raise ShapeError(f"head {head.shape} cannot classify features {y.shape}")
    return T.matmul(y, T.transpose(head, (1, 0)))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode(logits, vocab, branch: str | None = None) -> Prediction:
    """Argmax per position up to and including the first eos.

    Each kept step's confidence is the softmax probability of its argmax
    class.  Without an eos all positions are kept.
    """
    g = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if g.ndim != 2 or g.shape[1] != vocab.num_classes:
        raise ShapeError(f"logits {g.shape} do not match {vocab.num_classes} classes")
    probs = _softmax_np(g.astype(np.float64))
    ids = probs.argmax(axis=1)
    conf = probs[np.arange(len(ids)), ids]
    hits = np.nonzero(ids == vocab.eos_id)[0]
    n = int(hits[0]) + 1 if hits.size else len(ids)
    kept = [int(i) for i in ids[:n]]
    return Prediction(branch=branch or getattr(vocab, "branch", ""),
                      text=vocab.decode_ids(kept), token_ids=kept,
                      step_confidences=[float(c) for c in conf[:n]])


def multitask_loss(logits: Mapping[str, Tensor], targets: Mapping[str, np.ndarray],
                   ignore_ids: Mapping[str, int]) -> Tensor:
    """Unweighted sum of per-branch cross-entropies, pads ignored."""
    if not logits:
        raise ContractError("multitask_loss needs at least one branch")
    total = None
    for branch in logits:
        ce = T.cross_entropy(logits[branch], targets[branch], ignore_id=ignore_ids[branch])
        total = ce if total is None else T.add(total, ce)
    return total
