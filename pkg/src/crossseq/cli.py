"""Command line entry point: ``crossseq {train,evaluate,ablate,phantom}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import metrics
from .config import ExperimentConfig, load_config
from .data import PhantomConfig, list_subjects, phantom_cohort, save_subject


def _parse_values(text: str):
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_train(args):
    from .trainer import load_checkpoint, train

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    resume = load_checkpoint(args.resume, expected=cfg, force=args.force) if args.resume else None
    res = train(cfg, args.out, resume=resume)
    print(f"trained {res.checkpoint.epoch} epochs; checkpoint at {Path(args.out) / 'checkpoint.pt'}")
    return 0


def cmd_evaluate(args):
    from .plotting import plot_metrics
    from .trainer import evaluate, load_checkpoint

    expected = load_config(args.config) if args.config else None
    ckpt = load_checkpoint(args.checkpoint, expected=expected, force=args.force)
    errors = {}
    results = evaluate(ckpt, list_subjects(args.data), threshold=args.threshold, which=args.model,
                       errors=errors)
    out = Path(args.out)
    metrics.write_metric_csv(results, out / "metrics.csv")
    summary = metrics.format_summary_table([("model", results)])
    (out / "summary.txt").write_text(summary + "\n")
    if results:
        plot_metrics(results, out / "metrics.png")
    print(summary)
    for name, err in errors.items():
        print(f"error: {name}: {err}", file=sys.stderr)
    return 1 if errors and not results else 0


def cmd_ablate(args):
    from .trainer import run_ablation

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    table = run_ablation(cfg, args.axis, _parse_values(args.values) if args.values else (), out_dir=args.out)
    print(table.text())
    return 0


def cmd_phantom(args):
    cfg = PhantomConfig()
    if args.shape:
        cfg = PhantomConfig(shape=tuple(int(s) for s in args.shape.split("x")))
    cohort = phantom_cohort(args.subjects, seed=args.seed, config=cfg)
    for subj in cohort:
        save_subject(subj, args.out)
    print(f"wrote {len(cohort)} phantom subjects to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossseq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train student/teacher on the configured data")
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, default=Path("runs/train"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="3D metrics for every subject directory under --data")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--config", type=Path, help="refuse the checkpoint unless its config hash matches")
    e.add_argument("--out", type=Path, default=Path("runs/eval"))
    e.add_argument("--threshold", type=float)
    e.add_argument("--model", choices=("teacher", "student"))
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="one run per value along an ablation axis")
    a.add_argument("--axis", required=True, choices=("M", "thres", "alpha_beta", "components", "input_combo"))
    a.add_argument("--values", default="", help="comma separated, e.g. 1,3 or 10:1,1:1")
    a.add_argument("--config", type=Path)
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", type=Path, default=Path("runs/ablate"))
    a.set_defaults(func=cmd_ablate)

    ph = sub.add_parser("phantom", help="write synthetic subjects as NIfTI")
    ph.add_argument("--out", type=Path, required=True)
    ph.add_argument("--subjects", type=int, default=10)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--shape", help="HxWxD, e.g. 32x32x12")
    ph.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError
    from .trainer import CheckpointError, TrainingAborted

    try:
        return args.func(args)
    except (CheckpointError, ConfigError, TrainingAborted, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
