"""Optimiser, training loops, evaluation and the model bundle stored in checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .cfs import cfs_select
from .checkpoint import read_checkpoint, restore_params, write_checkpoint
from .datagen import (DEFAULT_LEXICON, AugmentSpec, RenderSpec, check_word, random_erase, read_lexicon,
                      render_sample, sample_rng)
from .errors import ConfigError, DegenerateInputError, FormatError, NonFiniteError
from .heads import BRANCHES, Prediction
from .lfs import (PREFIX as LFS_PREFIX, LfsConfig, TextVocab, image_embed, info_nce_loss, init_lfs,
                  logit_scale, perturb, select_for_embedding, text_embed, text_embed_ids)
from .model import Recognizer
from .params import ModelParams
from .tokenizer import (DEFAULT_CHARSET, BpeVocab, CharVocab, WpVocab, bpe_train, wp_train)

log = logging.getLogger(__name__)

# sample streams: keep train/val/lfs renders independent of each other
STREAM_TRAIN, STREAM_VAL, STREAM_LFS, STREAM_LFS_VAL = 1, 2, 3, 4


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdadeltaState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    acc_delta: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: Iterable[tuple[str, T.Tensor]], state: AdadeltaState, lr: float,
                  rho: float = 0.9, eps: float = 1e-6) -> None:
    """One Adadelta update in place; tensors without a gradient are skipped.

    ``E[g^2] <- rho E[g^2] + (1 - rho) g^2``;
    ``d = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``;
    ``E[dx^2] <- rho E[dx^2] + (1 - rho) d^2``;  ``x <- x - lr d``.
    """
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ConfigError(f"{name}: gradient {g.shape} != parameter {p.data.shape}")
        sq = state.square_avg.get(name)
        if sq is None:
            sq = state.square_avg[name] = np.zeros_like(p.data)
            state.acc_delta[name] = np.zeros_like(p.data)
        acc = state.acc_delta[name]
        if sq.shape != p.data.shape:
            raise ConfigError(f"{name}: optimiser state {sq.shape} != parameter {p.data.shape}")
        sq *= rho
        sq += (1 - rho) * g * g
        delta = np.sqrt(acc + eps)
        delta /= np.sqrt(sq + eps)
        delta *= g
        acc *= rho
        acc += (1 - rho) * delta * delta
        p.data -= lr * delta


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: Iterable[tuple[str, T.Tensor]], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; tensors without a gradient are skipped."""
    b1, b2 = betas
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ConfigError(f"{name}: gradient {g.shape} != parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ConfigError(f"{name}: optimiser state {m.shape} != parameter {p.data.shape}")
        t = state.steps[name] = state.steps.get(name, 0) + 1
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        denom = np.sqrt(v / (1 - b2 ** t))
        denom += eps
        p.data -= (lr / (1 - b1 ** t)) * m / denom


OPTIMIZERS = ("adadelta", "adam")


class Optimizer:
    """Adadelta (``rho``, ``eps``) or Adam (default betas, eps 1e-8) behind one ``step``."""

    def __init__(self, name: str = "adadelta", rho: float = 0.9, eps: float = 1e-6):
        if name not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
        self.name = name
        self.rho, self.eps = rho, eps
        self.state = AdadeltaState() if name == "adadelta" else AdamState()

    def step(self, params: Iterable[tuple[str, T.Tensor]], lr: float) -> None:
        if self.name == "adadelta":
            adadelta_step(params, self.state, lr, self.rho, self.eps)
        else:
            adam_step(params, self.state, lr)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(step, total) / total))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LfsTrainConfig:
    iterations: int = 5000
    batch_size: int = 16
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.9
    eps: float = 1e-6
    erase_prob: float = 0.8
    augment: float = 1.0
    model: dict = field(default_factory=dict)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 20000
    batch_size: int = 32
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.9
    eps: float = 1e-6
    branches: list = field(default_factory=lambda: list(BRANCHES))
    max_len: int = 27
    backbone: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    augment: float = 1.0
    lexicon: str | None = None
    bpe_dir: str | None = None
    wp_dir: str | None = None
    bpe_merges: int = 512
    wp_vocab_size: int = 1024
    out_dir: str = "run"
    log_every: int = 100
    eval_every: int = 0
    val_count: int = 200
    lfs: dict = field(default_factory=dict)

    def __post_init__(self):
        if "char" not in self.branches:
            raise ConfigError("the char branch must be enabled")
        bad = set(self.branches) - set(BRANCHES)
        if bad:
            raise ConfigError(f"unknown branches {sorted(bad)}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("config must set a seed")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise FormatError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.backbone)

    def render_spec(self) -> RenderSpec:
        bb = self.backbone_config()
        opts = {"height": bb.height, "width": bb.width, "channels": bb.channels,
                "max_len": self.max_len, "seed": self.seed, **self.render}
        return RenderSpec(**opts)

    def lfs_config(self) -> LfsTrainConfig:
        return LfsTrainConfig(**self.lfs)

    def words(self) -> list[str]:
        return read_lexicon(self.lexicon) if self.lexicon else list(DEFAULT_LEXICON)


# ---------------------------------------------------------------------------
# model bundle


class Bundle:
    """A recognizer plus (optionally) its LFS parameters, as stored in a checkpoint."""

    def __init__(self, recognizer: Recognizer, lfs: LfsConfig | None = None,
                 extra: Mapping[str, object] | None = None):
        self.recognizer = recognizer
        self.lfs = lfs
        self.extra = dict(extra or {})
        self.text_vocab = TextVocab(recognizer.vocabs["char"].charset, recognizer.max_len)

    @property
    def params(self) -> ModelParams:
        return self.recognizer.params

    def add_lfs(self, cfg: LfsConfig) -> None:
        if self.lfs is not None:
            raise ConfigError("bundle already has LFS parameters")
        init_lfs(self.params, cfg, self.recognizer.cfg.dim, self.text_vocab.size)
        self.lfs = cfg

    def meta(self) -> dict:
        rec = self.recognizer
        vocabs = {}
        for b, v in rec.vocabs.items():
            if b == "char":
                vocabs[b] = {"charset": v.charset}
            elif b == "bpe":
                vocabs[b] = {"tokens": v.tokens, "merges": [list(m) for m in v.merges],
                             "byte_level": v.byte_level}
            else:
                vocabs[b] = {"tokens": v.tokens, "unk": v.unk, "prefix": v.prefix}
        return {"model": {"backbone": rec.cfg.to_dict(), "max_len": rec.max_len, "seed": rec.params.seed,
                          "enabled": list(rec.enabled), "vocabs": vocabs,
                          "lfs": self.lfs.to_dict() if self.lfs else None},
                **self.extra}

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, {n: t.data for n, t in self.params.items()}, self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "Bundle":
        tensors, meta = read_checkpoint(path)
        try:
            m = meta["model"]
            cfg = BackboneConfig(**m["backbone"])
            vocabs = {}
            for b, v in m["vocabs"].items():
                if b == "char":
                    vocabs[b] = CharVocab(v["charset"], m["max_len"])
                elif b == "bpe":
                    vocabs[b] = BpeVocab(v["tokens"], [tuple(x) for x in v["merges"]], v["byte_level"])
                elif b == "wp":
                    vocabs[b] = WpVocab(v["tokens"], v["unk"], v["prefix"])
                else:
                    raise FormatError(f"{path}: unknown branch {b!r}")
            rec = Recognizer(cfg, vocabs, m["max_len"], seed=m["seed"], enabled=m["enabled"])
            bundle = cls(rec, extra={k: v for k, v in meta.items() if k != "model"})
            if m.get("lfs"):
                bundle.add_lfs(LfsConfig(**m["lfs"]))
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: incomplete model metadata ({e})") from None
        restore_params(bundle.params, tensors)
        return bundle

    def predict(self, images: np.ndarray, batch_size: int = 64, fusion: Sequence[str] = ("cfs",)
                ) -> list[dict[str, object]]:
        """Per-image dict of branch predictions plus the requested fused decisions."""
        rec = self.recognizer
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        out = []
        for s in range(0, len(images), batch_size):
            res = rec.forward(images[s:s + batch_size])
            preds = rec.decode(res)
            img_emb = None
            if "lfs" in fusion:
                if self.lfs is None:
                    raise ConfigError("this checkpoint has no LFS parameters")
                img_emb = image_embed(self.params, self.lfs, res.encoded.z_penult, rec.cfg.heads).data
            for i, p in enumerate(preds):
                row: dict[str, object] = dict(p)
                if "cfs" in fusion:
                    row["cfs"] = cfs_select(p, "cumprod")
                    row["cfs_mean"] = cfs_select(p, "mean")
                if img_emb is not None:
                    row["lfs"] = select_for_embedding(self.params, self.lfs, img_emb[i], p, self.text_vocab)
                out.append(row)
        return out


def build_vocabs(cfg: TrainConfig, words: Sequence[str]) -> dict[str, object]:
    vocabs: dict[str, object] = {"char": CharVocab(DEFAULT_CHARSET, cfg.max_len)}
    corpus = {w.lower(): 1 for w in words}
    if "bpe" in cfg.branches:
        vocabs["bpe"] = BpeVocab.load(cfg.bpe_dir) if cfg.bpe_dir else \
            bpe_train(corpus, cfg.bpe_merges, alphabet=DEFAULT_CHARSET)
    if "wp" in cfg.branches:
        vocabs["wp"] = WpVocab.load(cfg.wp_dir) if cfg.wp_dir else \
            wp_train(corpus, cfg.wp_vocab_size, alphabet=DEFAULT_CHARSET)
    return vocabs


def render_batch(words: Sequence[str], spec: RenderSpec, seed: int, stream: int, step: int,
                 strength: float, erase_prob: float = 0.0) -> np.ndarray:
    imgs = []
    for i, w in enumerate(words):
        img = render_sample(w, spec, seed, stream, step, i, strength=strength)
        if erase_prob:
            img = random_erase(img, sample_rng(seed, stream, step, i, 1), erase_prob)
        imgs.append(img)
    return np.stack(imgs)


def fixed_set(words: Sequence[str], n: int, spec: RenderSpec, seed: int, stream: int,
              strength: float) -> tuple[np.ndarray, list[str]]:
    """``n`` renders cycling through ``words``; a held-out set when ``stream`` differs from training."""
    labels = [words[i % len(words)] for i in range(n)]
    if n == 0:
        return np.zeros((0, spec.height, spec.width, spec.channels), np.float32), labels
    return render_batch(labels, spec, seed, stream, 0, strength), labels


# ---------------------------------------------------------------------------
# training


def _check_consistency(words: Sequence[str], spec: RenderSpec, vocabs: Mapping[str, object]) -> None:
    if not words:
        raise DegenerateInputError("lexicon is empty")
    for w in words:
        check_word(w, spec)
        vocabs["char"].encode_ids(w)


def train_recognizer(cfg: TrainConfig, out_dir: str | Path | None = None,
                     progress: bool = False) -> Bundle:
    """Multi-task training; writes ``model.ckpt`` and ``train_log.csv`` to ``out_dir``."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    words = cfg.words()
    spec = cfg.render_spec()
    vocabs = build_vocabs(cfg, words)
    _check_consistency(words, spec, vocabs)
    rec = Recognizer(cfg.backbone_config(), vocabs, cfg.max_len, seed=cfg.seed, enabled=cfg.branches)
    bundle = Bundle(rec, extra={"train": cfg.to_dict()})
    val = fixed_set(words, cfg.val_count, spec, cfg.seed, STREAM_VAL, cfg.augment) \
        if cfg.eval_every else None
    opt = Optimizer(cfg.optimizer, cfg.rho, cfg.eps)
    trainable = rec.params.trainable()
    pick = np.random.default_rng([cfg.seed, STREAM_TRAIN])
    start = time.perf_counter()
    with open(out / "train_log.csv", "w", newline="") as fh:
        logw = csv.writer(fh)
        logw.writerow(["step", "lr", "loss", *[f"loss_{b}" for b in rec.enabled], "val_char_acc", "seconds"])
        for step in range(cfg.iterations):
            lr = cosine_lr(cfg.lr, step, cfg.iterations)
            batch = [words[i] for i in pick.integers(len(words), size=cfg.batch_size)]
            images = render_batch(batch, spec, cfg.seed, STREAM_TRAIN, step, cfg.augment)
            targets = rec.targets(batch)
            rec.params.zero_grad()
            with T.Tape() as tape:
                res = rec.forward(images)
                parts = {b: T.cross_entropy(res.logits[b], targets[b], ignore_id=vocabs[b].pad_id)
                         for b in rec.enabled}
                loss = None
                for b in rec.enabled:
                    loss = parts[b] if loss is None else T.add(loss, parts[b])
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"loss became non-finite at step {step}")
            tape.backward(loss)
            opt.step(trainable, lr)
            last = step == cfg.iterations - 1
            val_acc = ""
            if val is not None and ((step + 1) % cfg.eval_every == 0 or last):
                val_acc = f"{branch_accuracy(rec, *val)['char']:.4f}"
            if step % cfg.log_every == 0 or last or val_acc:
                logw.writerow([step, f"{lr:.6f}", f"{loss.item():.6f}",
                               *[f"{parts[b].item():.6f}" for b in rec.enabled], val_acc,
                               f"{time.perf_counter() - start:.1f}"])
                fh.flush()
                if progress:
                    log.info("step %d lr %.4f loss %.4f %s", step, lr, loss.item(),
                             f"val_char {val_acc}" if val_acc else "")
    bundle.save(out / "model.ckpt")
    return bundle


def _frozen_digest(params: ModelParams) -> int:
    crc = 0
    for n, t in params.items():
        if params.is_frozen(n):
            crc = zlib.crc32(t.data.tobytes(), crc)
    return crc


def lfs_batch_texts(labels: Sequence[str], seed: int, stream: int, step: int, n: int,
                    max_len: int, multi: int = 150) -> list[str]:
    """Ground truth then ``n`` noised variants per label (short words repeat variants to fill)."""
    texts = []
    for i, w in enumerate(labels):
        variants = perturb(w.lower(), sample_rng(seed, stream, step, i, 2), n=n, max_len=max_len, multi=multi)
        if len(variants) < n:
            variants = [variants[k % len(variants)] for k in range(n)]
        texts.append(w.lower())
        texts.extend(variants)
    return texts


def train_lfs(cfg: TrainConfig, bundle: Bundle, out_dir: str | Path | None = None,
              progress: bool = False) -> Bundle:
    """Contrastive training of the fusion encoders with everything else frozen."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lcfg = cfg.lfs_config()
    model_cfg = LfsConfig(**{"max_len": bundle.recognizer.max_len, **lcfg.model})
    if bundle.lfs is None:
        bundle.add_lfs(model_cfg)
    params = bundle.params
    params.unfreeze()
    params.freeze()
    params.unfreeze(LFS_PREFIX + ".")
    trainable = params.trainable()
    frozen_crc = _frozen_digest(params)
    rec = bundle.recognizer
    words = cfg.words()
    spec = cfg.render_spec()
    _check_consistency(words, spec, rec.vocabs)
    opt = Optimizer(lcfg.optimizer, lcfg.rho, lcfg.eps)
    pick = np.random.default_rng([cfg.seed, STREAM_LFS])
    n_neg = bundle.lfs.num_negatives
    start = time.perf_counter()
    with open(out / "lfs_log.csv", "w", newline="") as fh:
        logw = csv.writer(fh)
        logw.writerow(["step", "lr", "loss", "logit_scale", "seconds"])
        for step in range(lcfg.iterations):
            lr = cosine_lr(lcfg.lr, step, lcfg.iterations)
            labels = [words[i] for i in pick.integers(len(words), size=lcfg.batch_size)]
            images = render_batch(labels, spec, cfg.seed, STREAM_LFS, step, lcfg.augment, lcfg.erase_prob)
            texts = lfs_batch_texts(labels, cfg.seed, STREAM_LFS, step, n_neg, bundle.lfs.max_len,
                                    bundle.lfs.multi_edits)
            z_pen = rec.encode(images).z_penult
            params.zero_grad()
            with T.Tape() as tape:
                img = image_embed(params, bundle.lfs, z_pen, rec.cfg.heads)
                txt = text_embed(params, bundle.lfs, texts, bundle.text_vocab)
                txt = T.reshape(txt, (len(labels), n_neg + 1, bundle.lfs.embed_dim))
                loss = info_nce_loss(img, txt, logit_scale(params))
            tape.backward(loss)
            opt.step(trainable, lr)
            if _frozen_digest(params) != frozen_crc:
                raise RuntimeError(f"frozen parameters changed at step {step}")
            if step % cfg.log_every == 0 or step == lcfg.iterations - 1:
                scale = float(np.exp(params[f"{LFS_PREFIX}.log_scale"].data[0]))
                logw.writerow([step, f"{lr:.6f}", f"{loss.item():.6f}", f"{scale:.4f}",
                               f"{time.perf_counter() - start:.1f}"])
                fh.flush()
                if progress:
                    log.info("lfs step %d lr %.4f loss %.4f scale %.3f", step, lr, loss.item(), scale)
    params.unfreeze()
    bundle.extra["train"] = cfg.to_dict()
    bundle.save(out / "model_lfs.ckpt")
    return bundle


# ---------------------------------------------------------------------------
# evaluation


def _match(pred: str, label: str) -> bool:
    return pred.lower() == label.lower()


def branch_accuracy(rec: Recognizer, images: np.ndarray, labels: Sequence[str]) -> dict[str, float]:
    preds = rec.predict(images)
    return {b: float(np.mean([_match(p[b].text, l) for p, l in zip(preds, labels)])) for b in rec.enabled}


EVAL_MODES = ("char", "bpe", "wp", "cfs", "cfs_mean", "lfs", "oracle")


def evaluate(bundle: Bundle, images: np.ndarray, labels: Sequence[str],
             fusion: Sequence[str] | None = None) -> dict[str, float]:
    """Case-insensitive exact-match accuracy per branch, per fusion mode and for the oracle.

    The oracle counts a sample as correct when any enabled branch is.
    """
    if len(labels) == 0:
        raise DegenerateInputError("cannot evaluate on an empty set")
    if len(images) != len(labels):
        raise ConfigError(f"{len(images)} images for {len(labels)} labels")
    if fusion is None:
        fusion = ("cfs", "lfs") if bundle.lfs is not None else ("cfs",)
    rows = bundle.predict(images, fusion=fusion)
    branches = bundle.recognizer.enabled
    hits: dict[str, list[bool]] = {m: [] for m in (*branches, "oracle")}
    for row, label in zip(rows, labels):
        for b in branches:
            hits[b].append(_match(row[b].text, label))
        hits["oracle"].append(any(_match(row[b].text, label) for b in branches))
        for m in ("cfs", "cfs_mean", "lfs"):
            if m in row:
                hits.setdefault(m, []).append(_match(row[m].text, label))
    report = {m: float(np.mean(v)) for m, v in hits.items()}
    report["count"] = len(labels)
    return report


def lfs_rank_accuracy(bundle: Bundle, images: np.ndarray, labels: Sequence[str], seed: int,
                      stream: int = STREAM_LFS_VAL, batch_size: int = 16) -> float:
    """Fraction of images whose ground-truth text outscores all its noised variants."""
    if bundle.lfs is None:
        raise ConfigError("bundle has no LFS parameters")
    if len(labels) == 0:
        raise DegenerateInputError("cannot rank an empty set")
    rec, cfg = bundle.recognizer, bundle.lfs
    wins = 0
    for s in range(0, len(labels), batch_size):
        chunk = list(labels[s:s + batch_size])
        z_pen = rec.encode(images[s:s + batch_size]).z_penult
        img = image_embed(bundle.params, cfg, z_pen, rec.cfg.heads).data
        texts = lfs_batch_texts(chunk, seed, stream, s, cfg.num_negatives, cfg.max_len, cfg.multi_edits)
        ids, eos = bundle.text_vocab.encode_batch(texts)
        emb = text_embed_ids(bundle.params, cfg, ids, eos).data.reshape(len(chunk), -1, cfg.embed_dim)
        sims = np.einsum("bke,be->bk", emb, img)
        wins += int(np.sum(sims[:, 0] > sims[:, 1:].max(axis=1)))
    return wins / len(labels)


def init_lfs_loss(bundle: Bundle, cfg: TrainConfig) -> float:
    """InfoNCE on one freshly sampled LFS batch without updating anything."""
    rec, lcfg = bundle.recognizer, cfg.lfs_config()
    words = cfg.words()
    pick = np.random.default_rng([cfg.seed, STREAM_LFS])
    labels = [words[i] for i in pick.integers(len(words), size=lcfg.batch_size)]
    images = render_batch(labels, cfg.render_spec(), cfg.seed, STREAM_LFS, 0, lcfg.augment, lcfg.erase_prob)
    texts = lfs_batch_texts(labels, cfg.seed, STREAM_LFS, 0, bundle.lfs.num_negatives, bundle.lfs.max_len,
                            bundle.lfs.multi_edits)
    z_pen = rec.encode(images).z_penult
    img = image_embed(bundle.params, bundle.lfs, z_pen, rec.cfg.heads)
    txt = T.reshape(text_embed(bundle.params, bundle.lfs, texts, bundle.text_vocab),
                    (len(labels), bundle.lfs.num_negatives + 1, bundle.lfs.embed_dim))
    return info_nce_loss(img, txt, logit_scale(bundle.params)).item()
