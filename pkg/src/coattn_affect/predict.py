"""Inference over sliding windows, cross-fold fusion and evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import NormStats, Trial, WindowConfig, make_windows, parse_annotations, read_manifest, window_arrays
from .errors import DegenerateRaters, LengthMismatch, MalformedRow
from .fileio import read_checkpoint, write_checkpoint
from .folds import FUSERS, clip
from .metrics import CccReport, ccc
from .model import CoAttentionRegressor, ModelConfig
from .tensor import Tensor

CHECKPOINT_FILE = "best.afwt"
META_FILE = "meta.json"


@dataclass
class LoadedModel:
    model: CoAttentionRegressor
    stats: NormStats
    windows: WindowConfig


def predict_trial(model: CoAttentionRegressor, trial: Trial, stats: NormStats,
                  windows: WindowConfig = WindowConfig()) -> np.ndarray:
    """(N, 2) valence/arousal; frames covered by several windows get the mean of their predictions."""
    model.eval()
    n = len(trial)
    sums = np.zeros((n, 2))
    counts = np.zeros(n)
    for start, end in make_windows(n, windows, "eval"):
        arr = window_arrays(trial, start, end, stats, "eval", crop=model.cfg.crop_size)
        out = model(Tensor(arr["visual"]), Tensor(arr["audio"]), Tensor(arr["text"]))
        valid = arr["valid"]
        sums[start:start + valid, 0] += out.valence.data[:valid]
        sums[start:start + valid, 1] += out.arousal.data[:valid]
        counts[start:start + valid] += 1
    return sums / counts[:, None]


def save_model_dir(out_dir, state: dict, model_cfg: ModelConfig, stats: NormStats,
                   windows: WindowConfig, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / CHECKPOINT_FILE, state)
    meta = {"model": model_cfg.to_dict(), "norm_stats": stats.to_dict(),
            "window_len": windows.window_len, "hop": windows.hop, **(extra or {})}
    (out / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def load_model_dir(ckpt_dir) -> LoadedModel:
    """Rebuild a model from ``best.afwt`` and its ``meta.json`` sidecar."""
    path = Path(ckpt_dir)
    meta = json.loads((path / META_FILE).read_text(encoding="utf-8"))
    model = CoAttentionRegressor(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(read_checkpoint(path / CHECKPOINT_FILE))
    windows = WindowConfig(meta["window_len"], meta["hop"], None)
    return LoadedModel(model.eval(), NormStats.from_dict(meta["norm_stats"]), windows)


# -- prediction files ----------------------------------------------------------

def write_predictions(path, frames: Sequence[int], values: np.ndarray) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "valence", "arousal"])
    for f, (v, a) in zip(frames, values):
        writer.writerow([int(f), repr(float(v)), repr(float(a))])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame", "valence", "arousal"]:
            raise MalformedRow(f"{path}: header must be frame,valence,arousal")
        frames, values = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                frames.append(int(row["frame"]))
                values.append((float(row["valence"]), float(row["arousal"])))
            except (TypeError, ValueError):
                raise MalformedRow(f"{path}: line {lineno}: {row}") from None
    return np.array(frames, dtype=np.int64), np.array(values, dtype=np.float64).reshape(-1, 2)


# -- fusion --------------------------------------------------------------------

def fuse(per_fold: Sequence[np.ndarray], method: str = "ccc") -> np.ndarray:
    """Fuse K (N, 2) prediction arrays per target, then clip to [-1, 1]."""
    if method not in FUSERS:
        raise ValueError(f"unknown fusion method {method!r}; choose from {sorted(FUSERS)}")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in per_fold])
    if len(stack) == 1 or stack.shape[1] < 2:
        return clip(stack.mean(axis=0))
    out = np.empty(stack.shape[1:])
    for d in range(2):
        try:
            out[:, d] = FUSERS[method](stack[:, :, d])
        except DegenerateRaters:
            out[:, d] = stack[:, :, d].mean(axis=0)  # all folds constant: nothing to weight
    return clip(out)


def fuse_directory(preds_dir, method: str, out_dir) -> list[str]:
    """Fuse ``preds_dir/fold*/<trial>.csv`` into ``out_dir/<trial>.csv``; returns the trial ids."""
    fold_dirs = sorted(p for p in Path(preds_dir).iterdir() if p.is_dir() and p.name.startswith("fold"))
    if not fold_dirs:
        raise MalformedRow(f"{preds_dir}: no fold* prediction directories")
    trial_ids = sorted(p.stem for p in fold_dirs[0].glob("*.csv"))
    for tid in trial_ids:
        loaded = [read_predictions(d / f"{tid}.csv") for d in fold_dirs]
        frames = loaded[0][0]
        if any(not np.array_equal(f, frames) for f, _ in loaded):
            raise LengthMismatch(f"trial {tid}: folds disagree on frame indices")
        write_predictions(Path(out_dir) / f"{tid}.csv", frames, fuse([v for _, v in loaded], method))
    return trial_ids


# -- evaluation ----------------------------------------------------------------

def report(pred: np.ndarray, gold: np.ndarray) -> CccReport:
    return CccReport(ccc(pred[:, 0], gold[:, 0]), ccc(pred[:, 1], gold[:, 1]))


def evaluate_directory(preds_dir, manifest_path) -> tuple[dict[str, CccReport], CccReport]:
    """Per-trial reports for every labelled manifest trial with a prediction file, plus a pooled one."""
    base = Path(manifest_path).parent
    per_trial, preds, golds = {}, [], []
    for row in read_manifest(manifest_path):
        pred_path = Path(preds_dir) / f"{row.trial_id}.csv"
        if not row.annotation_path or not pred_path.is_file():
            continue
        labels, fmap = parse_annotations((base / row.annotation_path).read_text(encoding="utf-8"))
        frames, values = read_predictions(pred_path)
        if not np.array_equal(frames, fmap):
            raise LengthMismatch(f"trial {row.trial_id}: predicted frames do not match annotated frames")
        per_trial[row.trial_id] = report(values, labels)
        preds.append(values)
        golds.append(labels)
    if not per_trial:
        raise MalformedRow("no labelled trial has a prediction file")
    return per_trial, report(np.concatenate(preds), np.concatenate(golds))


def write_report(path, per_trial: dict[str, CccReport]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial_id", "ccc_valence", "ccc_arousal", "mean"])
    for tid, rep in per_trial.items():
        writer.writerow([tid, f"{rep.ccc_valence:.6f}", f"{rep.ccc_arousal:.6f}", f"{rep.mean_ccc:.6f}"])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass
class FusedPredictions:
    per_fold: list[dict[str, np.ndarray]]
    fused: dict[str, np.ndarray]
    report: CccReport | None


def predict_and_fuse(checkpoints: Sequence, trials: Sequence[Trial], out_dir=None,
                     method: str = "ccc") -> FusedPredictions:
    """Run every checkpoint over every trial, fuse across checkpoints and clip.

    With ``out_dir`` set, writes ``fold<k>/<trial>.csv`` and ``fused/<trial>.csv``.
    The report pools all labelled trials.
    """
    loaded = [load_model_dir(c) for c in checkpoints]
    per_fold = [{t.trial_id: predict_trial(m.model, t, m.stats, m.windows) for t in trials} for m in loaded]
    fused = {t.trial_id: fuse([fold[t.trial_id] for fold in per_fold], method) for t in trials}
    if out_dir is not None:
        out = Path(out_dir)
        for k, fold in enumerate(per_fold):
            for t in trials:
                write_predictions(out / f"fold{k}" / f"{t.trial_id}.csv", t.frame_index_map, fold[t.trial_id])
        for t in trials:
            write_predictions(out / "fused" / f"{t.trial_id}.csv", t.frame_index_map, fused[t.trial_id])
    labelled = [t for t in trials if t.labels is not None]
    rep = None
    if labelled:
        rep = report(np.concatenate([fused[t.trial_id] for t in labelled]),
                     np.concatenate([t.labels for t in labelled]))
    return FusedPredictions(per_fold, fused, rep)
