"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_synth_spec, load_train_config
from .data import load_trials, read_manifest
from .folds import FUSERS, FoldPlan, make_folds
from .predict import evaluate_directory, fuse_directory, predict_and_fuse, write_report
from .synth import generate_synth
from .train import train_fold

log = logging.getLogger("coattn_affect")


def cmd_synth(args) -> None:
    result = generate_synth(load_synth_spec(args.spec), args.out)
    print(result.manifest_path)


def cmd_folds(args) -> None:
    plan = make_folds(read_manifest(args.manifest), args.seed)
    plan.save(args.out)
    print("fold sizes:", " ".join(str(n) for n in plan.sizes()))


def cmd_train(args) -> None:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    plan = FoldPlan.load(args.folds)
    ids = {t for fold in plan.folds for t in fold}
    trials = load_trials(args.manifest, ids)
    result = train_fold(trials, plan, args.fold, cfg, args.out)
    print(f"best validation CCC {result.best_val_ccc:.4f} after {len(result.log)} epochs "
          f"(stopped: {result.stop_reason})")


def cmd_predict(args) -> None:
    rows = read_manifest(args.manifest)
    ids = [r.trial_id for r in rows if args.partition is None or r.partition == args.partition]
    trials = load_trials(args.manifest, ids)
    result = predict_and_fuse(args.checkpoints, trials, args.out, args.method)
    if result.report is not None:
        rep = result.report
        print(f"fused CCC valence {rep.ccc_valence:.4f} arousal {rep.ccc_arousal:.4f} mean {rep.mean_ccc:.4f}")


def cmd_center(args) -> None:
    ids = fuse_directory(args.preds, args.method, args.out)
    print(f"fused {len(ids)} trials into {args.out}")


def cmd_eval(args) -> None:
    per_trial, pooled = evaluate_directory(args.preds, args.manifest)
    write_report(args.out, per_trial)
    print(f"pooled CCC valence {pooled.ccc_valence:.4f} arousal {pooled.ccc_arousal:.4f} "
          f"mean {pooled.mean_ccc:.4f} over {len(per_trial)} trials")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coattn-affect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    p.add_argument("--spec", required=True, type=Path, help="TOML with SynthSpec fields")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("folds", help="plan six subject-independent folds")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--folds", required=True, type=Path)
    p.add_argument("--fold", required=True, type=int)
    p.add_argument("--config", type=Path, help="TOML with TrainConfig fields (defaults if omitted)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run checkpoints over trials and fuse the folds")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoints", required=True, nargs="+", type=Path)
    p.add_argument("--partition", help="only trials of this partition")
    p.add_argument("--method", choices=sorted(FUSERS), default="ccc")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("center", help="fuse per-fold prediction files")
    p.add_argument("--preds", required=True, type=Path)
    p.add_argument("--method", choices=sorted(FUSERS), default="ccc")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_center)

    p = sub.add_parser("eval", help="score prediction files against annotations")
    p.add_argument("--preds", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValueError as exc:  # includes every ValidationError and TOML syntax errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
