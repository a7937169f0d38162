"""Learnable fusion: image/text encoders trained contrastively against noised texts.

The image side reads the frozen backbone's penultimate block output through
a small adapter and a single-slot A^3 pool.  The text side is a narrow causal
Transformer over character ids bracketed by bos/eos.  Both end in LN, a
linear projection and L2 normalisation, so a dot product is a cosine.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import block_forward, causal_mask, init_block
from .cfs import TIE_ORDER, FusionDecision, select_by_scores
from .errors import ConfigError, DegenerateInputError, LengthError, ShapeError
from .heads import Prediction, a3_forward, init_a3
from .params import ModelParams
from .tensor import Tensor
from .tokenizer import DEFAULT_CHARSET, DEFAULT_MAX_LEN, CharVocab

log = logging.getLogger(__name__)

PREFIX = "lfs"
EDITS = ("delete", "replace", "repeat", "insert")


@dataclass(frozen=True)
class LfsConfig:
    adapter_blocks: int = 1
    text_blocks: int = 2
    num_negatives: int = 256
    embed_dim: int = 64
    text_dim: int = 32
    text_heads: int = 2
    max_len: int = DEFAULT_MAX_LEN
    multi_edits: int = 150
    init_logit_scale: float = 1.0

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        if self.adapter_blocks < 0 or self.text_blocks < 0:
            raise ConfigError("block counts must be >= 0")
        if self.text_dim % self.text_heads:
            raise ConfigError(f"text_dim {self.text_dim} not divisible by {self.text_heads} heads")
        if self.init_logit_scale <= 0:
            raise ConfigError("init_logit_scale must be positive")
        if self.max_len < 3:
            raise ConfigError("max_len must leave room for bos, one char and eos")

    def to_dict(self) -> dict:
        return asdict(self)


class TextVocab:
    """Character ids of the recognizer plus a bos id used only by the text encoder."""

    def __init__(self, charset: str = DEFAULT_CHARSET, max_len: int = DEFAULT_MAX_LEN):
        self.chars = CharVocab(charset, max_len)
        self.pad_id = self.chars.pad_id
        self.eos_id = self.chars.eos_id
        self.bos_id = self.chars.num_classes
        self.size = self.bos_id + 1
        self.max_len = max_len

    def encode_batch(self, words: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Ids (n, S) padded to the longest sequence, and each row's eos position."""
        limit = self.max_len - 2
        rows = []
        for w in words:
            if len(w) > limit:
                raise LengthError(f"text {w!r} longer than {limit} characters")
            rows.append([self.bos_id, *self.chars.encode_ids(w), self.eos_id])
        width = max((len(r) for r in rows), default=2)
        ids = np.full((len(rows), width), self.pad_id, dtype=np.int64)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
        eos_pos = np.array([len(r) - 1 for r in rows], dtype=np.int64)
        return ids, eos_pos


# ---------------------------------------------------------------------------
# parameters and encoders


def init_lfs(params: ModelParams, cfg: LfsConfig, backbone_dim: int, text_vocab_size: int) -> None:
    d, dt, e = backbone_dim, cfg.text_dim, cfg.embed_dim
    for i in range(cfg.adapter_blocks):
        init_block(params, f"{PREFIX}.adapter.{i}", d)
    init_a3(params, f"{PREFIX}.img.a3", d, 1)
    params.create(f"{PREFIX}.img.ln.g", (d,), "ones")
    params.create(f"{PREFIX}.img.ln.b", (d,), "zeros")
    params.create(f"{PREFIX}.img.proj", (d, e))
    params.create(f"{PREFIX}.txt.tok", (text_vocab_size, dt))
    params.create(f"{PREFIX}.txt.pos", (cfg.max_len, dt), std=0.01)
    for i in range(cfg.text_blocks):
        init_block(params, f"{PREFIX}.txt.blocks.{i}", dt)
    params.create(f"{PREFIX}.txt.ln.g", (dt,), "ones")
    params.create(f"{PREFIX}.txt.ln.b", (dt,), "zeros")
    params.create(f"{PREFIX}.txt.proj", (dt, e))
    params.create(f"{PREFIX}.log_scale", (1,), "zeros")
    params[f"{PREFIX}.log_scale"].data[:] = math.log(cfg.init_logit_scale)


def image_embed(params: ModelParams, cfg: LfsConfig, z_penult: Tensor, heads: int = 4,
                trace: dict | None = None) -> Tensor:
    """(B, N+1, D) penultimate features -> (B, E) unit vectors."""
    if z_penult.ndim == 2:
        z_penult = T.reshape(z_penult, (1, *z_penult.shape))
    if z_penult.ndim != 3 or z_penult.shape[-1] != params[f"{PREFIX}.img.proj"].shape[0]:
        raise ShapeError(f"image_embed input {z_penult.shape} does not match the adapter")
    z = z_penult
    for i in range(cfg.adapter_blocks):
        z = block_forward(params, f"{PREFIX}.adapter.{i}", z, heads)
    y, masks = a3_forward(params, f"{PREFIX}.img.a3", z)
    if trace is not None:
        trace["img_mask"] = masks.data
    b, _, d = y.shape
    y = T.layer_norm(T.reshape(y, (b, d)), params[f"{PREFIX}.img.ln.g"], params[f"{PREFIX}.img.ln.b"])
    return T.l2_normalize(T.matmul(y, params[f"{PREFIX}.img.proj"]))


def text_hidden(params: ModelParams, cfg: LfsConfig, ids: np.ndarray) -> Tensor:
    """Last-block activations (n, S, text_dim) under a causal mask."""
    n, s = ids.shape
    if s > cfg.max_len:
        raise LengthError(f"text sequence of {s} positions exceeds {cfg.max_len}")
    x = T.embedding(ids, params[f"{PREFIX}.txt.tok"])
    x = T.add(x, T.index(params[f"{PREFIX}.txt.pos"], slice(0, s)))
    mask = causal_mask(s)
    for i in range(cfg.text_blocks):
        x = block_forward(params, f"{PREFIX}.txt.blocks.{i}", x, cfg.text_heads, mask=mask)
    return x


def text_embed_ids(params: ModelParams, cfg: LfsConfig, ids: np.ndarray, eos_pos: np.ndarray) -> Tensor:
    # Rows sharing an eos position run together unpadded; under the causal
    # mask this gives the same values as one padded batch with less work.
    eos_pos = np.asarray(eos_pos)
    lengths = np.unique(eos_pos)
    parts, order = [], []
    for e in lengths:
        rows = np.nonzero(eos_pos == e)[0]
        h = text_hidden(params, cfg, ids[rows, :e + 1])
        parts.append(T.index(h, (slice(None), int(e))))
        order.append(rows)
    at_eos = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    order = np.concatenate(order)
    if not np.array_equal(order, np.arange(len(order))):
        at_eos = T.index(at_eos, np.argsort(order))
    at_eos = T.layer_norm(at_eos, params[f"{PREFIX}.txt.ln.g"], params[f"{PREFIX}.txt.ln.b"])
    return T.l2_normalize(T.matmul(at_eos, params[f"{PREFIX}.txt.proj"]))


def text_embed(params: ModelParams, cfg: LfsConfig, words: Sequence[str] | str,
               vocab: TextVocab | None = None) -> Tensor:
    """Words -> (n, E) unit vectors (a single string gives n = 1)."""
    if isinstance(words, str):
        words = [words]
    vocab = vocab or TextVocab(max_len=cfg.max_len)
    ids, eos_pos = vocab.encode_batch(words)
    return text_embed_ids(params, cfg, ids, eos_pos)


def logit_scale(params: ModelParams) -> Tensor:
    return T.exp(params[f"{PREFIX}.log_scale"])


# ---------------------------------------------------------------------------
# contrastive objective


def info_nce_loss(img: Tensor, texts: Tensor, scale: Tensor | float = 1.0) -> Tensor:
    """Mean over images of -log softmax at the positive text.

    ``img`` is (B, E); ``texts`` is (B, 1 + N, E) with the ground-truth text in
    slot 0 and N noised variants after it.  Both are expected unit-norm.
    """
    if img.ndim != 2 or texts.ndim != 3 or texts.shape[0] != img.shape[0] or texts.shape[2] != img.shape[1]:
        raise ShapeError(f"info_nce_loss: image {img.shape} vs texts {texts.shape}")
    if texts.shape[1] < 2:
        raise DegenerateInputError("info_nce_loss needs at least one negative")
    b, k, e = texts.shape
    sims = T.reshape(T.matmul(texts, T.reshape(img, (b, e, 1))), (b, k))
    if isinstance(scale, Tensor):
        sims = T.mul(sims, scale)
    else:
        sims = T.scale(sims, float(scale))
    return T.cross_entropy(sims, np.zeros(b, dtype=np.int64))


# ---------------------------------------------------------------------------
# noised text variants


def apply_edit(word: str, kind: str, pos: int, char: str = "") -> str:
    if kind == "delete":
        return word[:pos] + word[pos + 1:]
    if kind == "replace":
        return word[:pos] + char + word[pos + 1:]
    if kind == "repeat":
        return word[:pos + 1] + word[pos] + word[pos + 1:]
    if kind == "insert":
        return word[:pos] + char + word[pos:]
    raise ValueError(f"unknown edit {kind!r}")


def single_edit_variants(word: str, alphabet: str = DEFAULT_CHARSET) -> set[str]:
    """Every distinct non-empty result of one delete/replace/repeat/insert."""
    out = set()
    for i in range(len(word)):
        out.add(apply_edit(word, "delete", i))
        out.add(apply_edit(word, "repeat", i))
        for c in alphabet:
            out.add(apply_edit(word, "replace", i, c))
    for i in range(len(word) + 1):
        for c in alphabet:
            out.add(apply_edit(word, "insert", i, c))
    out.discard(word)
    out.discard("")
    return out


def _random_edit(word: str, rng: np.random.Generator, alphabet: str, kind: str | None = None,
                 pos: int | None = None) -> str:
    if kind is None:
        kind = EDITS[rng.integers(len(EDITS))]
    if not word:
        kind = "insert"
    hi = len(word) + 1 if kind == "insert" else len(word)
    if pos is None or pos >= hi:
        pos = int(rng.integers(hi))
    char = ""
    if kind == "replace":
        others = [c for c in alphabet if c != word[pos]] or list(alphabet)
        char = others[rng.integers(len(others))]
    elif kind == "insert":
        char = alphabet[rng.integers(len(alphabet))]
    return apply_edit(word, kind, pos, char)


def _multi_edit(word: str, rng: np.random.Generator, alphabet: str) -> str:
    k = int(rng.integers(2, 4))
    if len(word) >= k:
        # right to left so earlier positions keep their meaning
        positions = sorted(rng.choice(len(word), size=k, replace=False).tolist(), reverse=True)
    else:
        positions = [None] * k
    out = word
    for p in positions:
        out = _random_edit(out, rng, alphabet, pos=p)
    return out


def perturb(word: str, rng: np.random.Generator, n: int = 256, alphabet: str = DEFAULT_CHARSET,
            max_len: int = DEFAULT_MAX_LEN, multi: int = 150) -> list[str]:
    """Up to ``n`` distinct noised copies of ``word``, none equal to it.

    Single-character phase: ``ceil(T / L_w) * 5`` rounds, each drawing one edit
    of every kind at a random position.  Multi-character phase: ``multi``
    draws editing 2-3 distinct positions.  Results are pooled multi-first,
    deduplicated and topped up with further random draws.  Variants longer
    than ``max_len - 2`` or empty are dropped.
    """
    if not 1 <= len(word) <= max_len - 2:
        raise LengthError(f"word length {len(word)} outside [1, {max_len - 2}]")
    if n < 1:
        raise ConfigError("n must be >= 1")
    limit = max_len - 2
    seen = {word}
    singles, multis = [], []

    def keep(v: str, into: list) -> None:
        if v not in seen and 0 < len(v) <= limit:
            seen.add(v)
            into.append(v)

    rounds = math.ceil(max_len / len(word)) * 5
    for _ in range(rounds):
        for kind in EDITS:
            keep(_random_edit(word, rng, alphabet, kind), singles)
    for _ in range(multi):
        keep(_multi_edit(word, rng, alphabet), multis)
    pool = multis[:n] + singles[:max(0, n - len(multis))]
    extra: list[str] = []
    budget = 50 * n
    while len(pool) + len(extra) < n and budget > 0:
        budget -= 1
        v = _multi_edit(word, rng, alphabet) if multi and budget % 2 else _random_edit(word, rng, alphabet)
        keep(v, extra)
    pool += extra[:n - len(pool)]
    if not pool:
        raise DegenerateInputError(f"no distinct variants of {word!r} over {alphabet!r}")
    if len(pool) < n:
        log.info("only %d distinct variants of %r (wanted %d)", len(pool), word, n)
    return pool


# ---------------------------------------------------------------------------
# selection


def select_by_similarity(sims: Mapping[str, float], texts: Mapping[str, str]) -> FusionDecision:
    """Highest similarity wins; empty texts score -inf; ties go Char > BPE > WP."""
    scores = {b: (-math.inf if texts[b] == "" else float(s)) for b, s in sims.items()}
    return select_by_scores(scores, texts)


def lfs_select(params: ModelParams, cfg: LfsConfig, z_penult: Tensor,
               preds: Mapping[str, Prediction] | Sequence[Prediction], heads: int = 4,
               vocab: TextVocab | None = None) -> FusionDecision:
    """Embed one image and the branch texts; keep the text closest to the image."""
    img = image_embed(params, cfg, z_penult, heads).data[0]
    return select_for_embedding(params, cfg, img, preds, vocab)


def select_for_embedding(params: ModelParams, cfg: LfsConfig, img: np.ndarray,
                         preds: Mapping[str, Prediction] | Sequence[Prediction],
                         vocab: TextVocab | None = None) -> FusionDecision:
    """:func:`lfs_select` for an already computed image embedding."""
    if not isinstance(preds, Mapping):
        preds = {p.branch: p for p in preds}
    if not preds:
        raise DegenerateInputError("lfs_select needs at least one prediction")
    vocab = vocab or TextVocab(max_len=cfg.max_len)
    texts = {b: p.text for b, p in preds.items()}
    usable = [b for b, t in texts.items() if 0 < len(t) <= cfg.max_len - 2 and encodable(t, vocab)]
    sims = {b: -math.inf for b in texts}
    if usable:
        emb = text_embed(params, cfg, [texts[b] for b in usable], vocab).data
        for b, e in zip(usable, emb):
            sims[b] = float(e @ img)
    elif any(texts.values()):
        # nothing the text encoder can read (overlong or foreign symbols):
        # keep the first non-empty prediction in tie order
        branch = next(b for b in (*TIE_ORDER, *sorted(texts)) if texts.get(b))
        return FusionDecision(branch, texts[branch], sims)
    return select_by_similarity(sims, texts)


def encodable(text: str, vocab: TextVocab) -> bool:
    charset = vocab.chars.charset
    return all(c in charset for c in text.lower())
