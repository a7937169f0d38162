"""Confidence-based fusion: score each branch's prediction and keep the best."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ContractError, DegenerateInputError
from .heads import BRANCHES, Prediction

# earlier entries win ties
TIE_ORDER = BRANCHES
MODES = ("mean", "cumprod")


@dataclass(frozen=True)
class FusionDecision:
    branch: str
    text: str
    scores: dict

    @property
    def score(self) -> float:
        return self.scores[self.branch]


def score_mean(conf: Sequence[float]) -> float:
    if len(conf) == 0:
        raise DegenerateInputError("cannot score an empty confidence list")
    return math.fsum(conf) / len(conf)


def score_cumprod(conf: Sequence[float]) -> float:
    if len(conf) == 0:
        raise DegenerateInputError("cannot score an empty confidence list")
    return math.prod(float(c) for c in conf)


SCORERS = {"mean": score_mean, "cumprod": score_cumprod}


def select_by_scores(scores: Mapping[str, float], texts: Mapping[str, str]) -> FusionDecision:
    """Argmax over ``scores`` with ties resolved in :data:`TIE_ORDER`.

    Branches scoring -inf are never chosen; if every branch is -inf the
    input is degenerate.
    """
    order = [b for b in TIE_ORDER if b in scores] + sorted(set(scores) - set(TIE_ORDER))
    if not order:
        raise DegenerateInputError("no branches to choose from")
    best = None
    for b in order:
        s = scores[b]
        if math.isnan(s):
            raise ContractError(f"score for {b} is NaN")
        if s == -math.inf:
            continue
        if best is None or s > scores[best]:
            best = b
    if best is None:
        raise DegenerateInputError("every branch scored -inf")
    return FusionDecision(branch=best, text=texts[best], scores=dict(scores))


def cfs_select(preds: Mapping[str, Prediction] | Sequence[Prediction],
               mode: str = "cumprod") -> FusionDecision:
    """Pick the branch prediction with the highest confidence score."""
    if mode not in SCORERS:
        raise ContractError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    if not isinstance(preds, Mapping):
        preds = {p.branch: p for p in preds}
    if len(preds) == 0:
        raise DegenerateInputError("cfs_select needs at least one prediction")
    scores, texts = {}, {}
    for b, p in preds.items():
        scores[b] = SCORERS[mode](p.step_confidences) if p.step_confidences else -math.inf
        texts[b] = p.text
    return select_by_scores(scores, texts)
