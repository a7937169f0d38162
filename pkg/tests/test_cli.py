"""Command-line surface: sub-commands, outputs and exit codes."""

import json

import pytest

from mgpstr.cli import main
from mgpstr.datagen import read_manifest, read_pgm
from mgpstr.lfs import LfsConfig
from mgpstr.replay import load_table
from mgpstr.train import Bundle

import helpers


@pytest.fixture
def ckpt(tmp_path):
    bundle = Bundle(helpers.tiny_recognizer(0))
    path = tmp_path / "m.ckpt"
    bundle.save(path)
    return path


@pytest.fixture
def lfs_ckpt(tmp_path):
    bundle = Bundle(helpers.tiny_recognizer(0))
    bundle.add_lfs(LfsConfig(embed_dim=8, text_dim=4, max_len=8))
    path = tmp_path / "lfs.ckpt"
    bundle.save(path)
    return path


@pytest.fixture
def manifest(tmp_path):
    lex = tmp_path / "lex.txt"
    lex.write_text("cafe\nlow\nab\n")
    assert main(["-q", "datagen", "--lexicon", str(lex), "--count", "3", "--out", str(tmp_path / "data"),
                 "--height", "8", "--width", "8"]) == 0
    return tmp_path / "data" / "manifest.tsv"


class TestReplay:
    def test_bundled_table(self, capsys):
        assert main(["-q", "replay-fusion"]) == 0
        out = capsys.readouterr().out
        assert "18/18 rows reproduced" in out
        assert "FAIL" not in out

    def test_altered_table_fails(self, tmp_path, capsys):
        table = load_table()
        table["cfs"][0]["expected"] = "wp"
        (tmp_path / "t.json").write_text(json.dumps(table))
        assert main(["-q", "replay-fusion", "--table", str(tmp_path / "t.json")]) == 1
        assert "FAIL\tcfs\ttable" in capsys.readouterr().out

    def test_missing_table(self, tmp_path):
        assert main(["-q", "replay-fusion", "--table", str(tmp_path / "none.json")]) == 2


class TestTokenizeTrain:
    def test_bpe_and_wp(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text("lower\t5\nlowest\t2\nnewer\t6\n")
        assert main(["-q", "tokenize-train", "--algo", "bpe", "--corpus", str(corpus), "--size", "5",
                     "--out", str(tmp_path / "bpe")]) == 0
        assert main(["-q", "tokenize-train", "--algo", "wp", "--corpus", str(corpus), "--size", "60",
                     "--out", str(tmp_path / "wp")]) == 0
        assert any((tmp_path / "bpe").iterdir()) and any((tmp_path / "wp").iterdir())

    def test_exit_codes(self, tmp_path):
        corpus = tmp_path / "c.txt"
        corpus.write_text("")
        args = ["-q", "tokenize-train", "--algo", "bpe", "--corpus", str(corpus), "--size", "5",
                "--out", str(tmp_path / "bpe")]
        assert main(args) == 1
        corpus.write_text("ab\t-3\n")
        assert main(args) == 2


class TestDatagen:
    def test_writes_manifest(self, manifest):
        items = read_manifest(manifest)
        assert sorted(label for _, label in items) == ["ab", "cafe", "low"]
        assert read_pgm(items[0][0]).shape == (8, 8, 1)

    def test_missing_lexicon(self, tmp_path):
        assert main(["-q", "datagen", "--lexicon", str(tmp_path / "x"), "--count", "1",
                     "--out", str(tmp_path)]) == 2


class TestInferEval:
    def test_infer(self, ckpt, manifest, capsys):
        img = read_manifest(manifest)[0][0]
        assert main(["-q", "infer", "--ckpt", str(ckpt), "--image", str(img), "--fusion", "char"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 1

    def test_lfs_without_params(self, ckpt, manifest):
        img = read_manifest(manifest)[0][0]
        assert main(["-q", "infer", "--ckpt", str(ckpt), "--image", str(img), "--fusion", "lfs"]) == 1

    def test_infer_lfs(self, lfs_ckpt, manifest):
        img = read_manifest(manifest)[0][0]
        assert main(["-q", "infer", "--ckpt", str(lfs_ckpt), "--image", str(img), "--fusion", "lfs"]) == 0

    def test_eval_report(self, lfs_ckpt, manifest, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert main(["-q", "eval", "--ckpt", str(lfs_ckpt), "--manifest", str(manifest), "--fusion", "oracle",
                     "--json", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["count"] == 3
        assert all(rep["oracle"] >= rep[m] for m in ("char", "bpe", "wp", "cfs", "lfs"))
        assert capsys.readouterr().out.startswith("oracle\t")

    def test_eval_empty_manifest(self, ckpt, tmp_path):
        (tmp_path / "empty.tsv").write_text("")
        assert main(["-q", "eval", "--ckpt", str(ckpt), "--manifest", str(tmp_path / "empty.tsv")]) == 1

    def test_corrupt_checkpoint(self, tmp_path, manifest):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE")
        assert main(["-q", "eval", "--ckpt", str(bad), "--manifest", str(manifest)]) == 2


class TestAttn:
    def test_maps(self, ckpt, manifest, tmp_path):
        img = read_manifest(manifest)[0][0]
        out = tmp_path / "maps"
        assert main(["-q", "attn", "--ckpt", str(ckpt), "--image", str(img), "--out", str(out),
                     "--branch", "all"]) == 0
        for b in ("char", "bpe", "wp"):
            files = sorted((out / b).glob("slot_*.pgm"))
            assert len(files) == 8
            assert read_pgm(files[0]).shape == (8, 8, 1)


class TestTrainCommands:
    def test_train_and_lfs(self, tmp_path, capsys):
        lex = tmp_path / "lex.txt"
        lex.write_text("cafe\nlow\n")
        cfg = dict(seed=1, iterations=2, batch_size=2, max_len=8, lexicon=str(lex), bpe_merges=4, wp_vocab_size=40,
                   backbone=dict(height=8, width=8, patch=4, dim=8, depth=2, heads=2),
                   lfs=dict(iterations=1, batch_size=2, model=dict(num_negatives=4, embed_dim=8, text_dim=4,
                                                                   multi_edits=4)))
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        run = tmp_path / "run"
        assert main(["-q", "train", "--config", str(tmp_path / "cfg.json"), "--out", str(run)]) == 0
        assert main(["-q", "train-lfs", "--config", str(tmp_path / "cfg.json"), "--from", str(run / "model.ckpt"),
                     "--out", str(run)]) == 0
        assert Bundle.load(run / "model_lfs.ckpt").lfs is not None

    def test_bad_config(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"seed": 0, "branches": ["bpe"]}))
        assert main(["-q", "train", "--config", str(tmp_path / "cfg.json")]) == 1
        assert main(["-q", "train", "--config", str(tmp_path / "missing.json")]) == 2
