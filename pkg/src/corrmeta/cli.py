"""Command-line entry point: ``train``, ``eval``, ``infer``, ``gen-synthetic``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SyntheticSpec,
    assert_class_disjoint,
    decode_image,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_classes,
)
from .engine import MetricSink, TrainConfig, evaluate, infer_one, support_prototypes, train

logger = logging.getLogger("corrmeta")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return parts[0], parts[1], parts[2]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corrmeta", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="episodic training")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="class-folder root, or a root holding train/ and val/")
    src.add_argument("--synthetic", type=Path, help="JSON synthetic dataset spec")
    t.add_argument("--n-way", type=int, default=5)
    t.add_argument("--k-shot", type=int, default=5)
    t.add_argument("--q", type=int, default=15)
    t.add_argument("--episodes", type=int, default=10000)
    t.add_argument("--batch-episodes", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--decay", type=float, default=0.5)
    t.add_argument("--decay-every", type=int, default=2000)
    t.add_argument("--val-every", type=int, default=500)
    t.add_argument("--val-episodes", type=int, default=600)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--no-pyramid", action="store_true", help="also disables the correlation module")
    t.add_argument("--no-accm", action="store_true")
    t.add_argument("--no-corr-meta", action="store_true")
    t.add_argument("--split", type=_ratios, default=(0.6, 0.2, 0.2),
                   help="train,val,test class ratios when splitting a single pool (default 0.6,0.2,0.2)")
    t.add_argument("--image-size", type=int, default=64)
    t.add_argument("--metrics", type=Path, help="write the metric stream here instead of stdout")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a class-folder dataset")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--n-way", type=int, default=5)
    e.add_argument("--k-shot", type=int, default=5)
    e.add_argument("--q", type=int, default=15)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--format", choices=("table", "csv", "json"), default="table")

    i = sub.add_parser("infer", help="classify one image against a labelled support folder")
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--support", type=Path, required=True)
    i.add_argument("--query", type=Path, required=True)
    i.add_argument("--timing", action="store_true")

    g = sub.add_parser("gen-synthetic", help="render a synthetic dataset to class folders")
    g.add_argument("--spec", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    return ap


def _train_sets(args):
    if args.synthetic is not None:
        spec = SyntheticSpec.from_file(args.synthetic)
        pool = generate_synthetic(spec)
    else:
        root = args.data
        if (root / "train").is_dir() and (root / "val").is_dir():
            tr = load_dataset(root / "train", args.image_size, "train")
            va = load_dataset(root / "val", args.image_size, "val")
            assert_class_disjoint(tr, va)
            return tr, va
        pool = load_dataset(root, args.image_size)
    tr, va, te = split_classes(pool, args.split, seed=args.seed, min_classes=args.n_way)
    assert_class_disjoint(tr, va, te)
    return tr, va


def cmd_train(args) -> int:
    train_set, val_set = _train_sets(args)
    cfg = TrainConfig(
        episodes_total=args.episodes,
        val_every=args.val_every,
        batch_episodes=args.batch_episodes,
        lr0=args.lr,
        lr_decay=args.decay,
        decay_every=args.decay_every,
        n_way=args.n_way,
        k_shot=args.k_shot,
        q_queries=args.q,
        seed=args.seed,
        val_episodes=args.val_episodes,
        use_pyramid=not args.no_pyramid,
        use_accm=not (args.no_accm or args.no_pyramid),
        use_corr_meta=not args.no_corr_meta,
    )
    from .model import BackboneConfig, ModelConfig

    base = ModelConfig(backbone=BackboneConfig(input_size=train_set.image_size))
    if args.metrics is not None:
        with open(args.metrics, "w") as fh:
            ckpt = train(cfg, train_set, val_set, MetricSink(fh), model_config=base)
    else:
        ckpt = train(cfg, train_set, val_set, MetricSink(sys.stdout), model_config=base)
    save_checkpoint(ckpt, args.out)
    logger.info("best validation %.2f ± %.2f at episode %d -> %s",
                ckpt.best_val_accuracy, ckpt.best_val_ci95, ckpt.step, args.out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data, ckpt.model_config.backbone.input_size, "test")
    rep = evaluate(ckpt, ds, args.episodes, args.n_way, args.k_shot, args.q, args.seed)
    row = {"n_way": args.n_way, "k_shot": args.k_shot, **rep.as_dict()}
    if args.format == "json":
        print(json.dumps(row))
    elif args.format == "csv":
        print(",".join(row))
        print(",".join(str(v) for v in row.values()))
    else:
        print(f"{'setting':<16}{'accuracy (%)':>22}{'episodes':>10}")
        print(f"{f'{args.n_way}-way {args.k_shot}-shot':<16}{str(rep).split(' (')[0]:>22}{rep.episode_count:>10}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    size = ckpt.model_config.backbone.input_size
    support = load_dataset(args.support, size, "test")
    protos = support_prototypes(ckpt, support)
    image = decode_image(args.query, size)
    res = infer_one(ckpt, protos, image)
    out = {
        "label": res.class_name,
        "probabilities": {n: float(p) for n, p in zip(res.class_names, res.probabilities)},
    }
    if args.timing:
        runs = [infer_one(ckpt, protos, image).wall_ms for _ in range(100)]
        out["wall_ms_median"] = float(np.median(runs))
    print(json.dumps(out))
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec.from_file(args.spec)
    save_dataset(generate_synthetic(spec), args.out)
    logger.info("wrote %d classes x %d images to %s", spec.n_classes, spec.samples_per_class, args.out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gen-synthetic": cmd_gen_synthetic}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
