"""Optimisers, training loops, evaluation and checkpoints."""

import csv
import math
import struct

import numpy as np
import pytest

from mgpstr import tensor as T
from mgpstr.checkpoint import MAGIC, read_checkpoint, restore_params, write_checkpoint
from mgpstr.errors import ConfigError, DegenerateInputError, FormatError, VersionError
from mgpstr.heads import Prediction
from mgpstr.lfs import LfsConfig
from mgpstr.params import ModelParams
from mgpstr.tensor import Tensor
from mgpstr.train import (AdadeltaState, AdamState, Bundle, Optimizer, TrainConfig, adadelta_step, adam_step,
                          cosine_lr, evaluate, fixed_set, lfs_rank_accuracy, train_lfs, train_recognizer)

import helpers

WORDS = ["cafe", "low", "table", "ab", "1869"]


def tiny_train_config(tmp_path, **kw):
    lex = tmp_path / "lex.txt"
    lex.write_text("\n".join(WORDS) + "\n")
    d = dict(seed=3, iterations=4, batch_size=4, max_len=8, lexicon=str(lex), bpe_merges=6, wp_vocab_size=50,
             backbone=dict(height=8, width=16, patch=4, dim=8, depth=2, heads=2), out_dir=str(tmp_path / "run"),
             log_every=1)
    d.update(kw)
    return TrainConfig.from_dict(d)


def named(value, grad):
    t = Tensor(np.array(value, dtype=np.float64))
    t.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return [("x", t)], t


class TestAdadelta:
    def test_zero_grad_no_update(self):
        params, t = named([1.5, -2.0], [0.0, 0.0])
        adadelta_step(params, AdadeltaState(), lr=1.0)
        assert t.data.tolist() == [1.5, -2.0]

    def test_missing_grad_skipped(self):
        params, t = named([1.0], None)
        state = AdadeltaState()
        adadelta_step(params, state, lr=1.0)
        assert t.data.tolist() == [1.0] and not state.square_avg

    def test_scalar_step(self):
        params, t = named([1.0], [2.0])
        state = AdadeltaState()
        adadelta_step(params, state, lr=1.0, rho=0.9, eps=1e-6)
        eg2 = 0.1 * 4.0
        d = math.sqrt(1e-6) / math.sqrt(eg2 + 1e-6) * 2.0
        assert abs(t.data[0] - (1.0 - d)) < 1e-15
        assert abs(state.acc_delta["x"][0] - 0.1 * d * d) < 1e-18
        # second step with the same gradient
        t.grad = np.array([2.0])
        adadelta_step(params, state, lr=0.5, rho=0.9, eps=1e-6)
        eg2 = 0.9 * eg2 + 0.1 * 4.0
        d2 = math.sqrt(0.1 * d * d + 1e-6) / math.sqrt(eg2 + 1e-6) * 2.0
        assert abs(t.data[0] - (1.0 - d - 0.5 * d2)) < 1e-15

    def test_shape_mismatch(self):
        params, _ = named([1.0, 2.0], [1.0])
        with pytest.raises(ConfigError):
            adadelta_step(params, AdadeltaState(), lr=1.0)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        params, t = named([0.0, 0.0], [3.0, -0.02])
        adam_step(params, AdamState(), lr=0.1)
        np.testing.assert_allclose(t.data, [-0.1, 0.1], rtol=1e-6)

    def test_zero_grad_no_update(self):
        params, t = named([1.0], [0.0])
        adam_step(params, AdamState(), lr=0.1)
        assert t.data.tolist() == [1.0]

    def test_optimizer_dispatch(self):
        with pytest.raises(ConfigError):
            Optimizer("sgd")
        params, t = named([0.0], [1.0])
        Optimizer("adam").step(params, 0.5)
        assert abs(t.data[0] + 0.5) < 1e-6


class TestSchedule:
    def test_cosine(self):
        assert cosine_lr(1.0, 0, 100) == 1.0
        assert abs(cosine_lr(1.0, 50, 100) - 0.5) < 1e-12
        assert abs(cosine_lr(1.0, 100, 100)) < 1e-12
        assert cosine_lr(2.0, 5, 0) == 2.0


class TestConfig:
    def test_char_required(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_train_config(tmp_path, branches=["bpe"])

    def test_seed_required(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"iterations": 1})

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"seed": 0, "learning_rate": 1})

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd")

    def test_load_errors(self, tmp_path):
        with pytest.raises(FormatError):
            TrainConfig.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(FormatError):
            TrainConfig.load(tmp_path / "bad.json")

    def test_defaults(self):
        c = TrainConfig()
        assert (c.iterations, c.batch_size, c.optimizer, c.lr, c.rho, c.eps) == (20000, 32, "adadelta", 1.0, 0.9, 1e-6)
        assert c.lfs_config().iterations == 5000 and c.lfs_config().batch_size == 16


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestTrainRecognizer:
    def test_initial_loss_near_uniform(self, tmp_path):
        cfg = tiny_train_config(tmp_path, iterations=1)
        bundle = train_recognizer(cfg)
        loss0 = float(read_log(tmp_path / "run" / "train_log.csv")[0]["loss"])
        expect = sum(math.log(bundle.recognizer.vocabs[b].num_classes) for b in bundle.recognizer.enabled)
        assert abs(loss0 - expect) / expect < 0.10

    def test_deterministic_bytes(self, tmp_path):
        a = train_recognizer(tiny_train_config(tmp_path), tmp_path / "a")
        b = train_recognizer(tiny_train_config(tmp_path), tmp_path / "b")
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
        la = [r["loss"] for r in read_log(tmp_path / "a" / "train_log.csv")]
        lb = [r["loss"] for r in read_log(tmp_path / "b" / "train_log.csv")]
        assert la == lb and len(la) == 4
        assert a.params.names() == b.params.names()

    def test_char_only_run_has_no_other_heads(self, tmp_path):
        bundle = train_recognizer(tiny_train_config(tmp_path, branches=["char"]))
        assert not bundle.params.names("heads.bpe") and not bundle.params.names("heads.wp")

    def test_disabled_heads_not_updated(self):
        rec = helpers.tiny_recognizer(0, enabled=["char", "wp"])
        before = rec.params.snapshot("heads.bpe")
        opt = Optimizer("adadelta")
        with T.Tape() as tape:
            loss = rec.loss(helpers.random_images(2, rec.cfg), ["cafe", "low"])
        tape.backward(loss)
        opt.step(rec.params.trainable(), 1.0)
        after = rec.params.snapshot("heads.bpe")
        assert all(before[n].tobytes() == after[n].tobytes() for n in before)
        assert rec.params["heads.wp.cls.W"].grad is not None

    def test_inconsistent_lexicon_aborts(self, tmp_path):
        lex = tmp_path / "bad.txt"
        lex.write_text("cafe\nna-me\n")
        cfg = tiny_train_config(tmp_path, lexicon=str(lex))
        with pytest.raises(Exception) as e:
            train_recognizer(cfg)
        assert not isinstance(e.value, AssertionError)
        assert not (tmp_path / "run" / "model.ckpt").exists()


class TestTrainLfs:
    def test_frozen_bits_and_lfs_updates(self, tmp_path):
        cfg = tiny_train_config(tmp_path, iterations=1,
                                lfs=dict(iterations=2, batch_size=2, model=dict(num_negatives=6, embed_dim=8,
                                                                                text_dim=4, multi_edits=4)))
        bundle = train_recognizer(cfg)
        frozen = bundle.params.snapshot()
        train_lfs(cfg, bundle)
        after = bundle.params.snapshot()
        changed = {n for n in frozen if frozen[n].tobytes() != after[n].tobytes()}
        assert changed == set()
        lfs = bundle.params.names("lfs")
        assert lfs
        loaded = Bundle.load(tmp_path / "run" / "model_lfs.ckpt")
        assert loaded.lfs == bundle.lfs
        assert rows_equal(lfs, bundle.params, loaded.params)
        imgs, labels = fixed_set(WORDS, 4, cfg.render_spec(), 0, 9, 0.0)
        acc = lfs_rank_accuracy(loaded, imgs, labels, seed=0)
        assert 0.0 <= acc <= 1.0

    def test_lfs_requires_params(self):
        with pytest.raises(ConfigError):
            lfs_rank_accuracy(Bundle(helpers.tiny_recognizer()), np.zeros((1, 8, 8, 1)), ["a"], 0)


def rows_equal(names, a, b):
    return all(a[n].data.tobytes() == b[n].data.tobytes() for n in names)


class StubBundle:
    """Stands in for a Bundle whose predictions are given row by row."""

    def __init__(self, rows, enabled=("char", "bpe", "wp")):
        self.rows = rows
        self.lfs = None
        self.recognizer = type("R", (), {"enabled": enabled})()

    def predict(self, images, fusion=("cfs",)):
        from mgpstr.cfs import cfs_select
        out = []
        for r in self.rows:
            preds = {b: Prediction(b, t, [], list(c)) for b, (t, c) in r.items()}
            out.append({**preds, "cfs": cfs_select(preds), "cfs_mean": cfs_select(preds, "mean")})
        return out


class TestEvaluate:
    def test_perfect_model(self):
        labels = ["cafe", "hotel"]
        rows = [{b: (w, [0.9] * 3) for b in ("char", "bpe", "wp")} for w in labels]
        rep = evaluate(StubBundle(rows), np.zeros((2, 1)), labels)
        assert all(rep[m] == 1.0 for m in ("char", "bpe", "wp", "cfs", "cfs_mean", "oracle"))
        assert rep["count"] == 2

    def test_oracle_counts_any_branch(self):
        labels = ["cafe", "hotel", "hard"]
        rows = [
            {"char": ("cafe", [0.2]), "bpe": ("cafx", [0.9]), "wp": ("c", [0.1])},
            {"char": ("hotl", [0.9]), "bpe": ("hotel", [0.3]), "wp": ("hote", [0.1])},
            {"char": ("herd", [0.9]), "bpe": ("hrd", [0.3]), "wp": ("hed", [0.1])},
        ]
        rep = evaluate(StubBundle(rows), np.zeros((3, 1)), labels)
        assert rep["oracle"] == pytest.approx(2 / 3)
        assert rep["cfs"] == 0.0 and rep["char"] == pytest.approx(1 / 3)

    def test_case_insensitive(self):
        rows = [{"char": ("CAFE", [1.0])}]
        assert evaluate(StubBundle(rows, ("char",)), np.zeros((1, 1)), ["cafe"])["char"] == 1.0

    def test_empty_set(self):
        with pytest.raises(DegenerateInputError):
            evaluate(StubBundle([]), np.zeros((0, 1)), [])

    def test_oracle_bounds_real_model(self):
        rec = helpers.tiny_recognizer(5)
        bundle = Bundle(rec)
        imgs = helpers.random_images(6, rec.cfg, 1)
        labels = [p["char"].text or "x" for p in rec.predict(imgs)]
        labels[0] = "zzz"
        rep = evaluate(bundle, imgs, labels)
        for m in ("char", "bpe", "wp", "cfs", "cfs_mean"):
            assert rep["oracle"] >= rep[m]
        assert rep["char"] == 5 / 6


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.array([np.nan], np.float32),
                   "scalar": np.zeros((), np.float32)}
        write_checkpoint(tmp_path / "x.ckpt", tensors, {"cfg": {"k": [1, 2]}})
        back, meta = read_checkpoint(tmp_path / "x.ckpt")
        assert set(back) == set(tensors)
        assert all(back[n].tobytes() == tensors[n].tobytes() and back[n].shape == tensors[n].shape for n in tensors)
        assert meta == {"cfg": {"k": [1, 2]}}

    def test_layout(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {"w": np.array([1.0, 2.0], np.float32)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        expect = MAGIC + struct.pack("<III", 1, 1, 1) + b"w" + struct.pack("<II", 1, 2) + struct.pack("<ff", 1, 2)
        assert raw == expect

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_version(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(MAGIC + struct.pack("<II", 2, 0))
        with pytest.raises(VersionError):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_truncated_and_trailing(self, tmp_path):
        write_checkpoint(tmp_path / "x.ckpt", {"w": np.ones((4,), np.float32)})
        raw = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "t.ckpt")
        (tmp_path / "e.ckpt").write_bytes(raw + b"\0")
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "e.ckpt")

    def test_unknown_names_listed(self):
        p = ModelParams(0)
        p.create("a", (2,))
        with pytest.raises(FormatError, match="zz"):
            restore_params(p, {"a": np.zeros(2, np.float32), "zz": np.zeros(1, np.float32)})
        with pytest.raises(FormatError):
            restore_params(p, {})

    def test_bundle_round_trip_preserves_evaluation(self, tmp_path):
        rec = helpers.tiny_recognizer(2)
        bundle = Bundle(rec)
        bundle.add_lfs(LfsConfig(embed_dim=8, text_dim=4, max_len=8))
        bundle.save(tmp_path / "m.ckpt")
        loaded = Bundle.load(tmp_path / "m.ckpt")
        imgs = helpers.random_images(4, rec.cfg, 3)
        labels = ["cafe", "ab", "low", "x"]
        assert evaluate(bundle, imgs, labels) == evaluate(loaded, imgs, labels)
        loaded.save(tmp_path / "m2.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
