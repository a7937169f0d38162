"""The multi-granularity recognizer: backbone plus one A^3 head per branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, EncoderOutput, encode, init_backbone, patch_embed
from .errors import ConfigError
from .heads import BRANCHES, Prediction, a3_forward, classify, greedy_decode, init_a3, init_head, multitask_loss
from .params import ModelParams
from .tensor import Tensor
from .tokenizer import make_targets


def standardize(images: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Per-image zero mean, unit variance.

    Rendered words come with random background level and polarity; removing
    the per-image offset keeps that shared component from swamping the
    token-to-token differences the A^3 masks rely on.
    """
    x = np.asarray(images, dtype=np.float32)
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return (x - mu) / np.maximum(sd, eps)


@dataclass
class RecognizerOutput:
    encoded: EncoderOutput
    logits: dict[str, Tensor]
    masks: dict[str, Tensor]


class Recognizer:
    """Backbone + per-branch A^3 module and classifier.

    ``vocabs`` maps branch name to vocabulary; a head is built for each entry.
    ``enabled`` picks which heads run in :meth:`forward` and the loss.  The
    character branch is mandatory.
    """

    def __init__(self, cfg: BackboneConfig, vocabs: Mapping[str, object], max_len: int,
                 seed: int = 0, enabled: Sequence[str] | None = None,
                 params: ModelParams | None = None):
        if "char" not in vocabs:
            raise ConfigError("the character branch is required")
        if getattr(vocabs["char"], "max_len", max_len) != max_len:
            raise ConfigError(f"char vocab max_len {vocabs['char'].max_len} != {max_len}")
        unknown = set(vocabs) - set(BRANCHES)
        if unknown:
            raise ConfigError(f"unknown branches {sorted(unknown)}")
        self.cfg = cfg
        self.vocabs = dict(vocabs)
        self.max_len = max_len
        self.enabled = tuple(b for b in BRANCHES if b in (enabled or vocabs))
        if "char" not in self.enabled:
            raise ConfigError("the character branch cannot be disabled")
        missing = set(self.enabled) - set(self.vocabs)
        if missing:
            raise ConfigError(f"enabled branches without vocabularies: {sorted(missing)}")
        if params is None:
            params = ModelParams(seed)
            init_backbone(params, cfg)
            for b in BRANCHES:
                if b in self.vocabs:
                    init_a3(params, f"heads.{b}.a3", cfg.dim, max_len)
                    init_head(params, f"heads.{b}.cls", cfg.dim, self.vocabs[b].num_classes)
        self.params = params

    @property
    def branches(self) -> tuple[str, ...]:
        return self.enabled

    def encode(self, images: np.ndarray, trace: dict | None = None) -> EncoderOutput:
        """Backbone features for a batch (or a single H x W x C image)."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        z0 = patch_embed(self.params, self.cfg, standardize(images))
        return encode(self.params, self.cfg, z0, trace=trace)

    def forward(self, images: np.ndarray, trace: dict | None = None) -> RecognizerOutput:
        enc = self.encode(images, trace)
        logits, masks = {}, {}
        for b in self.enabled:
            y, m = a3_forward(self.params, f"heads.{b}.a3", enc.z_last)
            logits[b] = classify(y, self.params[f"heads.{b}.cls.W"])
            masks[b] = m
        return RecognizerOutput(enc, logits, masks)

    def targets(self, labels: Sequence[str]) -> dict[str, np.ndarray]:
        return {b: np.stack([make_targets(w, self.vocabs[b], self.max_len) for w in labels])
                for b in self.enabled}

    def loss(self, images: np.ndarray, labels: Sequence[str]) -> Tensor:
        out = self.forward(images)
        ignore = {b: self.vocabs[b].pad_id for b in self.enabled}
        return multitask_loss(out.logits, self.targets(labels), ignore)

    def decode(self, out: RecognizerOutput) -> list[dict[str, Prediction]]:
        batch = next(iter(out.logits.values())).shape[0]
        return [{b: greedy_decode(out.logits[b].data[i], self.vocabs[b], b) for b in self.enabled}
                for i in range(batch)]

    def predict(self, images: np.ndarray, batch_size: int = 64) -> list[dict[str, Prediction]]:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        preds = []
        for s in range(0, len(images), batch_size):
            preds.extend(self.decode(self.forward(images[s:s + batch_size])))
        return preds
