"""Shared builders for the test modules (tiny models, gradient case table)."""

from __future__ import annotations

import numpy as np

from mgpstr import tensor as T
from mgpstr.backbone import BackboneConfig, attention, block_forward, causal_mask, init_block
from mgpstr.gradcheck import check_directional, check_op
from mgpstr.heads import a3_forward, init_a3
from mgpstr.lfs import LfsConfig, TextVocab, image_embed, info_nce_loss, init_lfs, logit_scale, text_embed
from mgpstr.model import Recognizer
from mgpstr.params import ModelParams
from mgpstr.tensor import Tensor, default_dtype
from mgpstr.tokenizer import DEFAULT_CHARSET, CharVocab, bpe_train, wp_train

TINY_WORDS = ["cafe", "table", "hotel", "low", "lower", "guide", "1869", "able", "unable", "ab"]


def tiny_config(depth: int = 2) -> BackboneConfig:
    return BackboneConfig(height=8, width=8, channels=1, patch=4, dim=8, depth=depth, heads=2)


def tiny_vocabs(max_len: int = 8) -> dict:
    corpus = {w: 1 for w in TINY_WORDS}
    return {
        "char": CharVocab(max_len=max_len),
        "bpe": bpe_train(corpus, 6, alphabet=DEFAULT_CHARSET),
        "wp": wp_train(corpus, 50, alphabet=DEFAULT_CHARSET),
    }


def tiny_recognizer(seed: int = 0, depth: int = 2, enabled=None, max_len: int = 8) -> Recognizer:
    return Recognizer(tiny_config(depth), tiny_vocabs(max_len), max_len, seed=seed, enabled=enabled)


def random_images(n: int, cfg: BackboneConfig, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, cfg.height, cfg.width, cfg.channels)).astype(np.float32)


def _param_op(build, names, fixed=None):
    """Wrap a params-reading forward as ``fn(x, *named params)`` for check_op.

    ``fixed`` supplies parameters the forward reads but the check skips.
    """
    def fn(x, *ts):
        p = ModelParams(0)
        for n, a in (fixed or {}).items():
            p._tensors[n] = Tensor(a)
        for n, t in zip(names, ts):
            p._tensors[n] = t
        return build(p, x)
    return fn


def _block_params(prefix: str, dim: int, seed: int) -> dict[str, np.ndarray]:
    p = ModelParams(seed)
    init_block(p, prefix, dim, mlp_ratio=2)
    rng = np.random.default_rng(seed)
    # larger than init so every path carries signal; biases nonzero
    return {n: rng.normal(0, 0.4, t.shape) for n, t in p.items()}


def gradient_cases(seed: int) -> list[tuple[str, object, list[np.ndarray]]]:
    """(name, fn, inputs) for every differentiable op plus composite layers."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    tgt = rng.integers(0, 5, size=4)
    tgt[0] = 2
    ignore_tgt = tgt.copy()
    ignore_tgt[1] = 4
    ids = rng.integers(0, 6, size=(2, 3))
    mask = rng.uniform(size=(3, 4)) > 0.3
    mask[:, 0] = True
    cases = [
        ("add", T.add, [r(3, 4), r(3, 4)]),
        ("add_broadcast", T.add, [r(2, 3, 4), r(4)]),
        ("sub", T.sub, [r(3, 4), r(4)]),
        ("mul", T.mul, [r(3, 4), r(3, 4)]),
        ("scale", lambda a: T.scale(a, -1.7), [r(3, 4)]),
        ("exp", T.exp, [r(3, 4) * 0.5]),
        ("gelu", T.gelu, [r(3, 5) * 2]),
        ("matmul", T.matmul, [r(3, 4), r(4, 2)]),
        ("matmul_batch_shared", T.matmul, [r(2, 3, 4), r(4, 2)]),
        ("bmm", T.matmul, [r(2, 3, 4), r(2, 4, 5)]),
        ("linear", T.linear, [r(2, 3, 4), r(4, 5), r(5)]),
        ("softmax_last", lambda a: T.softmax(a, -1), [r(3, 4)]),
        ("softmax_axis1", lambda a: T.softmax(a, 1), [r(2, 5, 3)]),
        ("softmax_masked", lambda a: T.softmax(a, -1, mask=mask), [r(3, 4)]),
        ("layer_norm", T.layer_norm, [r(2, 4), r(4), r(4)]),
        ("l2_normalize", T.l2_normalize, [r(3, 4)]),
        ("sum", lambda a: T.sum_(a, axis=1), [r(3, 4)]),
        ("mean", lambda a: T.mean(a, axis=0, keepdims=True), [r(3, 4)]),
        ("cross_entropy", lambda a: T.cross_entropy(a, tgt), [r(4, 5)]),
        ("cross_entropy_ignore", lambda a: T.cross_entropy(a, ignore_tgt, ignore_id=4), [r(4, 5)]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [r(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        ("index_slice", lambda a: T.index(a, (slice(None), 1)), [r(3, 4)]),
        ("index_repeat", lambda a: T.index(a, np.array([0, 2, 0])), [r(3, 4)]),
        ("embedding", lambda t: T.embedding(ids, t), [r(6, 3)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("expand", lambda a: T.expand(a, (3, 2, 4)), [r(1, 2, 1)]),
    ]

    blk = _block_params("b", 4, seed)
    bnames = list(blk)
    anames = [n for n in bnames if ".attn." in n]
    avals = [blk[n] for n in anames]
    cases.append(("attention", _param_op(lambda p, x: attention(p, "b", x, 2), anames),
                  [r(2, 3, 4), *avals]))
    cases.append(("attention_causal", _param_op(
        lambda p, x: attention(p, "b", x, 2, mask=causal_mask(3)), anames), [r(2, 3, 4), *avals]))
    cases.append(("encoder_block", _param_op(lambda p, x: block_forward(p, "b", x, 2), bnames),
                  [r(2, 3, 4), *blk.values()]))

    a3_names = ["a.ln_in.g", "a.ln_in.b", "a.alpha", "a.U", "a.ln_out.g", "a.ln_out.b"]
    a3_vals = [1 + 0.3 * r(4), 0.3 * r(4), r(3, 4), r(4, 4), 1 + 0.3 * r(4), 0.3 * r(4)]
    cases.append(("a3_forward", _param_op(lambda p, x: a3_forward(p, "a", x)[0], a3_names),
                  [r(2, 5, 4), *a3_vals]))
    cases.append(("a3_masks", _param_op(lambda p, x: a3_forward(p, "a", x)[1], a3_names[:3],
                                                 dict(zip(a3_names[3:], a3_vals[3:]))),
                  [r(2, 5, 4), *a3_vals[:3]]))

    def nce(img, texts, s):
        return info_nce_loss(T.l2_normalize(img), T.l2_normalize(texts), s)
    cases.append(("info_nce", nce, [r(2, 3), r(2, 5, 3), np.array([1.3])]))
    return cases


def run_gradient_case(name, fn, inputs, seed: int, h: float = 1e-4) -> float:
    return max(check_op(fn, inputs, seed=seed, h=h))


def micro_model_errors(seed: int, h: float = 1e-4) -> dict[str, float]:
    """Directional FD check of the joint loss over every recognizer parameter."""
    with default_dtype(np.float64):
        rec = tiny_recognizer(seed)
        for _, t in rec.params.items():
            t.data = t.data.astype(np.float64)
            # widen the init so no tensor sits in a near-zero-gradient corner
            t.data += np.random.default_rng(seed).normal(0, 0.05, t.shape)
        images = random_images(2, rec.cfg, seed)
        labels = ["cafe", "low"]
        names = rec.params.names()
        tensors = [rec.params[n] for n in names]
        errs = check_directional(lambda: rec.loss(images, labels), tensors, seed=seed, h=h)
    return {names[i]: e for i, e in errs.items()}


def lfs_model_errors(seed: int, h: float = 1e-4) -> dict[str, float]:
    """Directional FD check of the InfoNCE loss over every fusion parameter."""
    cfg = LfsConfig(embed_dim=6, text_dim=4, text_heads=2, max_len=8, num_negatives=3)
    vocab = TextVocab(max_len=8)
    with default_dtype(np.float64):
        p = ModelParams(seed)
        init_lfs(p, cfg, 8, vocab.size)
        rng = np.random.default_rng(seed)
        for _, t in p.items():
            t.data = t.data + rng.normal(0, 0.1, t.shape)
        z = Tensor(rng.standard_normal((2, 5, 8)))
        words = [["cafe", "caf", "cafee", "xafe"], ["low", "lo", "lw", "lowe"]]

        def loss():
            img = image_embed(p, cfg, z, heads=2)
            txt = T.reshape(text_embed(p, cfg, [w for row in words for w in row], vocab), (2, 4, 6))
            return info_nce_loss(img, txt, logit_scale(p))

        names = p.names()
        errs = check_directional(loss, [p[n] for n in names], seed=seed, h=h)
    return {names[i]: e for i, e in errs.items()}
