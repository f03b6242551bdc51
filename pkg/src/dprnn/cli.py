"""Command-line entry point: ``dprnn <command> [--flags]``.

Usage errors exit with status 2, runtime failures with status 1. Set
``DPRNN_LOG_LEVEL`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config, read_config_file, resolve, write_config_file
from .data import Dataset, SynthSpec, synth_generate
from .evaluation import evaluate, model_similarity, ranks
from .gradcheck import STEP, TOLERANCE, run_suite
from .model import encode, score_pairs
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("dprnn")

# hyperparameter flags shared by train (and recorded in checkpoints)
_HYPER = {
    "profile": str,
    "lambda1": float,
    "lambda2": float,
    "beta_w": float,
    "beta_o": float,
    "gamma": float,
    "d": int,
    "lr": float,
    "lr_decay_every": int,
    "batch_size": int,
    "h": int,
    "q": int,
    "k": int,
    "img_dim": int,
    "epochs": int,
    "seed": int,
    "objective": str,
    "clip_norm": float,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dprnn", description="Cross-modal image-text matching.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic dataset", allow_abbrev=False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concepts", type=int, default=50)
    p.add_argument("--train-pairs", type=int, default=1000)
    p.add_argument("--val-pairs", type=int, default=100)
    p.add_argument("--test-pairs", type=int, default=200)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--mode", choices=("plain", "order_sensitive"), default="plain")
    p.add_argument("--img-dim", type=int, default=32)
    p.add_argument("--texts-per-image", type=int, default=1)

    p = sub.add_parser("train", help="train a model and write checkpoints", allow_abbrev=False)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--config", type=Path, help="flat key=value file; flags override it")
    for name, kind in _HYPER.items():
        p.add_argument(_flag(name), dest=name, type=kind, default=None)
    p.add_argument("--use-rve", dest="use_rve", action="store_true", default=None)
    p.add_argument("--no-rve", dest="use_rve", action="store_false")

    p = sub.add_parser("eval", help="fold-averaged recall report", allow_abbrev=False)
    _model_args(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", type=Path, help="report file (default: stdout)")

    p = sub.add_parser("retrieve", help="top-K items for one query", allow_abbrev=False)
    _model_args(p)
    query = p.add_mutually_exclusive_group(required=True)
    query.add_argument("--text", help="text id; ranks images")
    query.add_argument("--image", help="image id; ranks texts")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=STEP)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)

    p = sub.add_parser("dump-attention", help="attention matrices for one image-text pair", allow_abbrev=False)
    _model_args(p, multi=False)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _model_args(p: argparse.ArgumentParser, multi: bool = True) -> None:
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    if multi:
        p.add_argument(
            "--checkpoint",
            required=True,
            type=Path,
            action="append",
            help="repeat to average the scores of several models",
        )
    else:
        p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--no-rve", dest="use_rve", action="store_false", default=True)


def _load_models(paths) -> list:
    models = []
    for path in paths:
        params, cfg, _ = load_checkpoint(path)
        models.append((params, cfg.objective))
    return models


def cmd_synth(args) -> int:
    spec = SynthSpec(
        concepts=args.concepts,
        train_pairs=args.train_pairs,
        val_pairs=args.val_pairs,
        test_pairs=args.test_pairs,
        k=args.k,
        n=args.n,
        noise=args.noise,
        mode=args.mode,
        seed=args.seed,
        img_dim=args.img_dim,
        texts_per_image=args.texts_per_image,
    )
    root = synth_generate(args.out, spec)
    print(root)
    return 0


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {name: getattr(args, name) for name in (*_HYPER, "use_rve")}
    cfg = resolve(file_values, flags)
    data = Dataset(args.data).split(args.split)
    if data.descriptors.shape[1:] != (cfg.k, cfg.img_dim):
        raise ValueError(
            f"split has k={data.descriptors.shape[1]}, D={data.descriptors.shape[2]} "
            f"but the config says k={cfg.k}, img_dim={cfg.img_dim}"
        )
    args.out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, args.out / "config.txt")
    log_path = args.out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(epoch, params, entry):
        save_checkpoint(params, cfg, args.out / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch})
        with log_path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        print(f"epoch={epoch} loss={entry['loss']:.6f} lr={entry['lr']:.3g} stage={entry['stage']}", flush=True)

    params, _ = train(data, cfg, on_epoch=on_epoch)
    save_checkpoint(params, cfg, args.out / "model.ckpt", {"epoch": cfg.epochs - 1})
    return 0


def cmd_eval(args) -> int:
    split = Dataset(args.data).split(args.split)
    report = evaluate(_load_models(args.checkpoint), split, args.folds, use_rve=args.use_rve)
    text = report.to_text()
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_retrieve(args) -> int:
    split = Dataset(args.data).split(args.split)
    sim = model_similarity(_load_models(args.checkpoint), split, use_rve=args.use_rve)
    if args.text is not None:
        ids, queries, sims = split.image_ids, split.text_ids, sim.T
        query = args.text
    else:
        ids, queries, sims = split.text_ids, split.image_ids, sim
        query = args.image
    try:
        row = list(queries).index(query)
    except ValueError:
        raise KeyError(f"{query!r} is not in split {args.split!r}") from None
    order = np.argsort(ranks(sims[row : row + 1])[0], kind="stable")
    for rank, cand in enumerate(order[: args.top_k], 1):
        print(f"{rank}\t{ids[cand]}\t{sims[row, cand]:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in run_suite(args.seed, args.step):
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name}\t{err:.3e}\t{status}")
        worst = max(worst, err)
    print(f"max_rel_error={worst:.3e} tolerance={args.tolerance:g}")
    return 0 if worst <= args.tolerance else 1


def _write_matrix(path: Path, m: np.ndarray) -> None:
    m = np.atleast_2d(m)
    path.write_text("".join(" ".join(f"{v:.6f}" for v in row) + "\n" for row in m))


def cmd_dump_attention(args) -> int:
    split = Dataset(args.data).split(args.split)
    params, cfg, _ = load_checkpoint(args.checkpoint)
    try:
        i = list(split.image_ids).index(args.image)
        t = list(split.text_ids).index(args.text)
    except ValueError:
        raise KeyError(f"image {args.image!r} or text {args.text!r} is not in split {args.split!r}") from None
    batch = split.batch(np.array([i]), np.array([t]))
    enc = encode(params, batch)
    n = int(batch.word_mask[0].sum())
    out = score_pairs(params, enc, [0], [0], use_rve=args.use_rve, keep_details=True)
    r = out.result
    args.out.mkdir(parents=True, exist_ok=True)
    _write_matrix(args.out / "alpha.txt", r.alpha.data[0][:, :n])
    _write_matrix(args.out / "alpha_dual.txt", r.alpha_dual.data[0][:n])
    _write_matrix(args.out / "word_weights.txt", r.word_weights.data[0][:n])
    _write_matrix(args.out / "object_weights.txt", r.object_weights.data[0])
    lines = [f"image={args.image}", f"text={args.text}"]
    if out.reorderings is not None:
        lines.append("permutation=" + " ".join(map(str, out.reorderings.permutation[0])))
        lines.append("anchor_word=" + " ".join(map(str, out.reorderings.anchor_word[0])))
        _write_matrix(args.out / "relatedness.txt", out.relatedness[0][:, :n])
    lines.append(f"s_word={float(r.s_word.data[0]):.6f}")
    lines.append(f"s_object={float(r.s_object.data[0]):.6f}")
    (args.out / "pair.txt").write_text("\n".join(lines) + "\n")
    print(args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("DPRNN_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"dprnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
