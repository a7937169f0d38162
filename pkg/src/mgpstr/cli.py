"""Command-line entry point ``mgp``.

Exit codes: 0 success, 1 contract violation (bad arguments, config, input),
2 IO or file-format problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datagen import RenderSpec, make_dataset, read_lexicon, read_pgm, write_pgm
from .errors import ContractError, FormatError
from .replay import load_table, replay
from .tokenizer import DEFAULT_CHARSET, bpe_train, read_corpus, wp_train

log = logging.getLogger("mgpstr")


def cmd_tokenize_train(args) -> int:
    corpus = read_corpus(args.corpus)
    if args.algo == "bpe":
        vocab = bpe_train(corpus, args.size, alphabet=DEFAULT_CHARSET)
    else:
        vocab = wp_train(corpus, args.size, alphabet=DEFAULT_CHARSET)
    vocab.save(args.out)
    print(f"{args.algo}: {len(vocab)} tokens -> {args.out}")
    return 0


def cmd_datagen(args) -> int:
    words = read_lexicon(args.lexicon)
    spec = RenderSpec(height=args.height, width=args.width, seed=args.seed)
    manifest = make_dataset(spec, args.count, args.out, words=words, strength=args.augment)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, train_recognizer
    cfg = TrainConfig.load(args.config)
    out = Path(args.out or cfg.out_dir)
    train_recognizer(cfg, out, progress=True)
    print(out / "model.ckpt")
    return 0


def cmd_train_lfs(args) -> int:
    from .train import Bundle, TrainConfig, train_lfs
    cfg = TrainConfig.load(args.config)
    bundle = Bundle.load(args.from_ckpt)
    out = Path(args.out or cfg.out_dir)
    train_lfs(cfg, bundle, out, progress=True)
    print(out / "model_lfs.ckpt")
    return 0


def _fusion_modes(fusion: str) -> tuple[str, ...]:
    return ("cfs", "lfs") if fusion in ("lfs", "oracle") else ("cfs",)


def cmd_infer(args) -> int:
    from .train import Bundle
    bundle = Bundle.load(args.ckpt)
    image = read_pgm(args.image)
    row = bundle.predict(image[None], fusion=_fusion_modes(args.fusion))[0]
    if args.fusion not in row:
        raise ContractError(f"fusion {args.fusion!r} is not available for this checkpoint")
    chosen = row[args.fusion]
    print(chosen.text)
    if args.verbose:
        for b in bundle.recognizer.enabled:
            p = row[b]
            print(f"{b}\t{p.text}\t{np.prod(p.step_confidences):.4f}", file=sys.stderr)
        if hasattr(chosen, "scores"):
            print(f"{args.fusion} -> {chosen.branch} {json.dumps(chosen.scores)}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .datagen import load_manifest_images
    from .errors import DegenerateInputError
    from .train import Bundle, evaluate
    bundle = Bundle.load(args.ckpt)
    images, labels = load_manifest_images(args.manifest)
    if not labels:
        raise DegenerateInputError(f"{args.manifest} lists no samples")
    report = evaluate(bundle, images, labels, fusion=_fusion_modes(args.fusion))
    if args.fusion not in report:
        raise ContractError(f"fusion {args.fusion!r} is not available for this checkpoint")
    print(f"{args.fusion}\t{report[args.fusion]:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_attn(args) -> int:
    from .train import Bundle
    bundle = Bundle.load(args.ckpt)
    rec = bundle.recognizer
    image = read_pgm(args.image)
    res = rec.forward(image[None])
    cfg = rec.cfg
    gh, gw = cfg.height // cfg.patch, cfg.width // cfg.patch
    out = Path(args.out)
    branches = rec.enabled if args.branch == "all" else (args.branch,)
    written = 0
    for b in branches:
        if b not in res.masks:
            raise ContractError(f"branch {b!r} is not enabled in this checkpoint")
        masks = res.masks[b].data[0][:, 1:]          # drop the class token
        d = out / b
        d.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            grid = m.reshape(gh, gw)
            grid = grid / grid.max() if grid.max() > 0 else grid
            write_pgm(d / f"slot_{i:02d}.pgm", np.kron(grid, np.ones((cfg.patch, cfg.patch))))
            written += 1
    print(f"{written} maps -> {out}")
    return 0


def cmd_replay_fusion(args) -> int:
    results = replay(load_table(args.table))
    bad = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        bad += not r.ok
        print(f"{status}\t{r.table}\t{r.word}\texpected={r.expected}\tchosen={r.chosen}\ttext={r.text}")
    print(f"{len(results) - bad}/{len(results)} rows reproduced")
    return 0 if bad == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgp", description="Multi-granularity scene text recognition toolkit")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize-train", help="train a BPE or WordPiece vocabulary")
    s.add_argument("--algo", choices=("bpe", "wp"), required=True)
    s.add_argument("--corpus", required=True, help="one word (optionally TAB count) per line")
    s.add_argument("--size", type=int, required=True, help="BPE merges or WordPiece vocab size")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tokenize_train)

    s = sub.add_parser("datagen", help="render a synthetic word-image set")
    s.add_argument("--lexicon", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--augment", type=float, default=1.0, help="augmentation strength (0 disables)")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", help="train the recognizer")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override the config's out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-lfs", help="train the learnable fusion on a frozen recognizer")
    s.add_argument("--config", required=True)
    s.add_argument("--from", dest="from_ckpt", required=True, metavar="CKPT")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_lfs)

    s = sub.add_parser("infer", help="recognize one PGM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--fusion", choices=("char", "bpe", "wp", "cfs", "lfs"), default="cfs")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="word accuracy on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fusion", choices=("char", "bpe", "wp", "cfs", "cfs_mean", "lfs", "oracle"), default="cfs")
    s.add_argument("--json", help="also write the full report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn", help="export per-slot attention maps as PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--branch", default="char", choices=("char", "bpe", "wp", "all"))
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("replay-fusion", help="replay recorded fusion score tables")
    s.add_argument("--table", help="JSON table (defaults to the bundled one)")
    s.set_defaults(func=cmd_replay_fusion)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
