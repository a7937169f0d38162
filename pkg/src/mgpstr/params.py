"""Named parameter store with per-tensor trainable/frozen flags."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def name_rng(seed: int, name: str) -> np.random.Generator:
    """RNG stream keyed by (seed, parameter name).

    Keying by name keeps each tensor's initial value independent of which
    other tensors exist, so enabling or disabling a branch never shifts the
    draws of the others.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ModelParams:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self._tensors: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def create(self, name: str, shape, init: str = "normal", std: float = 0.02) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "normal":
            data = trunc_normal(name_rng(self.seed, name), shape, std)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def set(self, name: str, data: np.ndarray) -> Tensor:
        """Insert or overwrite ``name`` with ``data`` (used by checkpoint loading)."""
        t = Tensor(np.array(data, copy=True), requires_grad=name not in self._frozen, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self):
        return self._tensors.items()

    def freeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self._frozen.add(n)
            self._tensors[n].requires_grad = False
            self._tensors[n].grad = None

    def unfreeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self._frozen.discard(n)
            self._tensors[n].requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if n not in self._frozen]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self._tensors[n].data.copy() for n in self.names(prefix)}

    def num_elements(self, prefix: str = "") -> int:
        return sum(self._tensors[n].size for n in self.names(prefix))
