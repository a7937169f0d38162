"""ViT patch embedding and pre-norm Transformer encoder blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .params import ModelParams
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 32
    width: int = 64
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} must divide {self.height}x{self.width}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def num_patches(self) -> int:
        return self.height * self.width // (self.patch * self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @classmethod
    def full(cls) -> "BackboneConfig":
        return cls(height=32, width=128, channels=3, patch=4, dim=768, depth=12, heads=12)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    z_last: Tensor
    z_penult: Tensor


# ---------------------------------------------------------------------------
# encoder block


def init_block(params: ModelParams, prefix: str, dim: int, mlp_ratio: int = 4) -> None:
    hidden = dim * mlp_ratio
    for ln in ("ln1", "ln2"):
        params.create(f"{prefix}.{ln}.g", (dim,), "ones")
        params.create(f"{prefix}.{ln}.b", (dim,), "zeros")
    for proj in ("q", "k", "v", "proj"):
        params.create(f"{prefix}.attn.{proj}.w", (dim, dim))
        params.create(f"{prefix}.attn.{proj}.b", (dim,), "zeros")
    params.create(f"{prefix}.mlp.fc1.w", (dim, hidden))
    params.create(f"{prefix}.mlp.fc1.b", (hidden,), "zeros")
    params.create(f"{prefix}.mlp.fc2.w", (hidden, dim))
    params.create(f"{prefix}.mlp.fc2.b", (dim,), "zeros")


def causal_mask(seq_len: int) -> np.ndarray:
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def attention(params: ModelParams, prefix: str, x: Tensor, heads: int,
              mask: np.ndarray | None = None, trace: dict | None = None) -> Tensor:
    """Multi-head self-attention over ``x`` of shape (B, S, D)."""
    b, s, d = x.shape
    dh = d // heads
    p = lambda n: params[f"{prefix}.attn.{n}"]  # noqa: E731
    q = T.linear(x, p("q.w"), p("q.b"))
    k = T.linear(x, p("k.w"), p("k.b"))
    v = T.linear(x, p("v.w"), p("v.b"))
    q = T.transpose(T.reshape(T.scale(q, 1.0 / math.sqrt(dh)), (b, s, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, s, heads, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(v, (b, s, heads, dh)), (0, 2, 1, 3))
    probs = T.softmax(T.matmul(q, k), axis=-1, mask=mask)
    if trace is not None:
        trace.setdefault("attn", []).append(probs.data)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    return T.linear(ctx, p("proj.w"), p("proj.b"))


def block_forward(params: ModelParams, prefix: str, x: Tensor, heads: int,
                  mask: np.ndarray | None = None, trace: dict | None = None) -> Tensor:
    """z' = MSA(LN(z)) + z;  z'' = MLP(LN(z')) + z'."""
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    h = T.layer_norm(x, p("ln1.g"), p("ln1.b"))
    x = T.add(x, attention(params, prefix, h, heads, mask, trace))
    h = T.layer_norm(x, p("ln2.g"), p("ln2.b"))
    h = T.gelu(T.linear(h, p("mlp.fc1.w"), p("mlp.fc1.b")))
    return T.add(x, T.linear(h, p("mlp.fc2.w"), p("mlp.fc2.b")))


# ---------------------------------------------------------------------------
# backbone


def init_backbone(params: ModelParams, cfg: BackboneConfig, prefix: str = "backbone") -> None:
    params.create(f"{prefix}.patch.w", (cfg.patch_dim, cfg.dim))
    params.create(f"{prefix}.cls", (1, cfg.dim))
    params.create(f"{prefix}.pos", (cfg.num_patches + 1, cfg.dim))
    for i in range(cfg.depth):
        init_block(params, f"{prefix}.blocks.{i}", cfg.dim, cfg.mlp_ratio)


def patchify(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C), patches in row-major grid order."""
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if (h, w, c) != (cfg.height, cfg.width, cfg.channels):
        raise ShapeError(f"image {h}x{w}x{c} does not match config "
                         f"{cfg.height}x{cfg.width}x{cfg.channels}")
    p = cfg.patch
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def patch_embed(params: ModelParams, cfg: BackboneConfig, images, prefix: str = "backbone") -> Tensor:
    """[class; x_p E] + E_pos for a batch (or a single H x W x C image)."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    patches = Tensor(patchify(data, cfg))
    b = patches.shape[0]
    tokens = T.matmul(patches, params[f"{prefix}.patch.w"])
    cls = T.expand(T.reshape(params[f"{prefix}.cls"], (1, 1, cfg.dim)), (b, 1, cfg.dim))
    z0 = T.add(T.concat([cls, tokens], axis=1), params[f"{prefix}.pos"])
    if data.ndim == 3:
        z0 = T.reshape(z0, z0.shape[1:])
    return z0


def encode(params: ModelParams, cfg: BackboneConfig, z0: Tensor, prefix: str = "backbone",
           trace: dict | None = None) -> EncoderOutput:
    if z0.shape[-2:] != (cfg.num_patches + 1, cfg.dim):
        raise ShapeError(f"encoder input {z0.shape} != (.., {cfg.num_patches + 1}, {cfg.dim})")
    single = z0.ndim == 2
    z = T.reshape(z0, (1, *z0.shape)) if single else z0
    prev = z
    for i in range(cfg.depth):
        prev = z
        z = block_forward(params, f"{prefix}.blocks.{i}", z, cfg.heads, trace=trace)
    if single:
        z, prev = T.reshape(z, z0.shape), T.reshape(prev, z0.shape)
    return EncoderOutput(z_last=z, z_penult=prev)
