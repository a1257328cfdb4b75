"""Subject-independent fold planning and fusion of per-fold predictions.

Fold 0 is the original validation partition, untouched. The training
partition is split into five more folds by packing whole subjects, so a
subject never straddles two folds.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ManifestRow
from .errors import DegenerateRaters, LengthMismatch, MalformedRow, NonFiniteInput, SubjectSplitImpossible
from .metrics import ccc_flagged

N_FOLDS = 6
WEIGHT_FLOOR = 1e-6
TRAIN_NAMES = frozenset({"train", "training"})
VALIDATION_NAMES = frozenset({"validation", "val", "valid", "devel", "development"})


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]
    origin: int = 0  # fold that reproduces the original train/validation split

    def __post_init__(self):
        seen = [t for fold in self.folds for t in fold]
        if len(seen) != len(set(seen)):
            raise MalformedRow("a trial appears in more than one fold")

    def fold_of(self, trial_id: str) -> int:
        for k, fold in enumerate(self.folds):
            if trial_id in fold:
                return k
        raise KeyError(trial_id)

    def sizes(self) -> list[int]:
        return [len(f) for f in self.folds]

    def split(self, fold_idx: int) -> tuple[list[str], list[str]]:
        """(training ids, validation ids) when ``fold_idx`` is held out."""
        if not 0 <= fold_idx < len(self.folds):
            raise ValueError(f"fold index {fold_idx} outside [0, {len(self.folds)})")
        train = [t for k, fold in enumerate(self.folds) if k != fold_idx for t in fold]
        return train, list(self.folds[fold_idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["trial_id", "fold"])
        for k, fold in enumerate(self.folds):
            for t in fold:
                writer.writerow([t, k])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "FoldPlan":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["trial_id", "fold"]:
            raise MalformedRow("fold file header must be trial_id,fold")
        folds: list[list[str]] = [[] for _ in range(N_FOLDS)]
        for lineno, row in enumerate(reader, start=2):
            try:
                k = int(row["fold"])
            except (TypeError, ValueError):
                raise MalformedRow(f"line {lineno}: bad fold {row['fold']!r}") from None
            if not 0 <= k < N_FOLDS:
                raise MalformedRow(f"line {lineno}: fold {k} outside [0, {N_FOLDS})")
            folds[k].append(row["trial_id"])
        return cls(tuple(tuple(f) for f in folds))

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def _pack(groups: list[tuple[str, list[str]]], bins: int) -> list[list[str]]:
    """Largest-first greedy packing, then pairwise moves/swaps until sizes differ by at most one."""
    members: list[list[tuple[str, list[str]]]] = [[] for _ in range(bins)]
    load = [0] * bins
    for group in groups:
        k = min(range(bins), key=lambda b: (load[b], b))
        members[k].append(group)
        load[k] += len(group[1])

    improved = True
    while improved and max(load) - min(load) > 1:
        improved = False
        hi = max(range(bins), key=lambda b: (load[b], -b))
        lo = min(range(bins), key=lambda b: (load[b], b))
        gap = load[hi] - load[lo]
        # a move or swap shifting d trials helps when 0 < d < gap
        for i, g in enumerate(members[hi]):
            d = len(g[1])
            if d < gap:
                members[lo].append(members[hi].pop(i))
                load[hi] -= d
                load[lo] += d
                improved = True
                break
        if improved:
            continue
        for i, g in enumerate(members[hi]):
            for j, h in enumerate(members[lo]):
                d = len(g[1]) - len(h[1])
                if 0 < d < gap:
                    members[hi][i], members[lo][j] = h, g
                    load[hi] -= d
                    load[lo] += d
                    improved = True
                    break
            if improved:
                break
    return [[t for _, trials in sorted(m) for t in trials] for m in members]


def make_folds(manifest: Sequence[ManifestRow], seed: int = 0) -> FoldPlan:
    """Six subject-independent folds: the validation partition, then five packed from training."""
    val = [r.trial_id for r in manifest if r.partition.lower() in VALIDATION_NAMES]
    train = [r for r in manifest if r.partition.lower() in TRAIN_NAMES]
    if not train:
        raise SubjectSplitImpossible("manifest has no training trials")
    val_subjects = {r.subject_id for r in manifest if r.partition.lower() in VALIDATION_NAMES}
    leaked = val_subjects & {r.subject_id for r in train}
    if leaked:
        raise SubjectSplitImpossible(f"subjects in both partitions: {sorted(leaked)[:5]}")

    by_subject: dict[str, list[str]] = defaultdict(list)
    for r in train:
        by_subject[r.subject_id].append(r.trial_id)
    bins = N_FOLDS - 1
    capacity = -(-len(train) // bins)
    biggest = max(by_subject.items(), key=lambda kv: len(kv[1]))
    if len(biggest[1]) > capacity:
        raise SubjectSplitImpossible(
            f"subject {biggest[0]!r} has {len(biggest[1])} trials, more than a fold holds ({capacity})")

    rng = np.random.default_rng(seed)
    subjects = sorted(by_subject)
    order = rng.permutation(len(subjects))
    groups = [(subjects[i], by_subject[subjects[i]]) for i in order]
    groups.sort(key=lambda g: -len(g[1]))  # stable: the seeded order breaks ties
    return FoldPlan((tuple(val), *(tuple(f) for f in _pack(groups, bins))))


# -- fusion --------------------------------------------------------------------

def rater_matrix(raters) -> np.ndarray:
    """Validate a rater set: K >= 2 finite sequences of one length, as a (K, T) array."""
    try:
        mat = np.asarray(raters, dtype=np.float64)
    except ValueError:
        raise LengthMismatch("rater sequences differ in length") from None
    if mat.ndim != 2 or mat.shape[0] < 2 or mat.shape[1] < 2:
        raise LengthMismatch(f"need at least 2 raters of at least 2 frames, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NonFiniteInput("rater sequences contain NaN or Inf")
    return mat


def _weights(scores: list[float]) -> np.ndarray:
    w = np.maximum(WEIGHT_FLOOR, np.asarray(scores))
    return w / w.sum()


def ccc_center_weights(raters) -> tuple[np.ndarray, np.ndarray]:
    """Centered raters and their leave-one-out CCC weights."""
    mat = rater_matrix(raters)
    if np.all(np.ptp(mat, axis=1) == 0):
        raise DegenerateRaters("every rater is constant")
    grand = mat.mean()
    centered = mat - mat.mean(axis=1, keepdims=True) + grand
    k = len(centered)
    total = centered.sum(axis=0)
    scores = [ccc_flagged(centered[i], (total - centered[i]) / (k - 1))[0] for i in range(k)]
    return centered, _weights(scores)


def ccc_center(raters) -> np.ndarray:
    """Shift each rater to the grand mean, then weight by agreement with the others.

    Weight k is max(1e-6, CCC(rater k, mean of the other centered raters)),
    normalized to sum to one.
    """
    centered, w = ccc_center_weights(raters)
    return w @ centered


def ewe_weights(raters) -> np.ndarray:
    mat = rater_matrix(raters)
    if np.all(np.ptp(mat, axis=1) == 0):
        raise DegenerateRaters("every rater is constant")
    mean = mat.mean(axis=0)
    return _weights([ccc_flagged(r, mean)[0] for r in mat])


def ewe_merge(raters) -> np.ndarray:
    """Estimator weighted evaluator: weights from each rater's CCC with the unweighted mean."""
    return ewe_weights(raters) @ rater_matrix(raters)


def clip(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("cannot clip NaN or Inf")
    return np.clip(arr, -1.0, 1.0)


FUSERS = {"ccc": ccc_center, "ewe": ewe_merge}
