"""Trial ingestion and alignment.

A trial is one annotation file plus the frames, audio features and word spans
recorded alongside it. Annotation rows carrying the -5 sentinel are dropped and
the surviving rows define the trial length N; every modality is then brought
to exactly N rows so each frame lines up with one label.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import EmptyFeature, EmptyTrial, MalformedRow, OverlappingSpans, ShapeMismatch
from .fileio import load_feature_file

SENTINEL = -5.0
FRAME_SIZE = 48
FRAME_EXTENSIONS = (".png", ".jpg", ".jpeg")
MANIFEST_FIELDS = ("trial_id", "subject_id", "partition", "fps", "frames_dir", "annotation_path",
                   "audio_feat_path", "wordspan_csv", "wordfeat_path")


# -- annotations ---------------------------------------------------------------

def _annotation_rows(text: str) -> list[tuple[float, float]]:
    lines = [ln.strip() for ln in text.splitlines()]
    if not lines:
        raise EmptyTrial("annotation file is empty")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 2:
            raise MalformedRow(f"line {lineno}: expected 'valence,arousal', got {line!r}")
        try:
            v, a = float(cells[0]), float(cells[1])
        except ValueError:
            raise MalformedRow(f"line {lineno}: non-numeric value in {line!r}") from None
        for value in (v, a):
            if value != SENTINEL and not -1.0 <= value <= 1.0:
                raise MalformedRow(f"line {lineno}: label {value} outside [-1, 1]")
        rows.append((v, a))
    return rows


def parse_annotations(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Labels (N, 2) and the original frame index of each kept row.

    A row is excluded when either column holds the -5 sentinel.
    """
    rows = _annotation_rows(text)
    keep = [i for i, (v, a) in enumerate(rows) if v != SENTINEL and a != SENTINEL]
    if not keep:
        raise EmptyTrial("every annotation row carries the -5 sentinel")
    labels = np.array([rows[i] for i in keep], dtype=np.float64)
    return labels, np.array(keep, dtype=np.int64)


# -- visual --------------------------------------------------------------------

def frame_path(frames_dir: str | os.PathLike, index: int) -> Path | None:
    base = Path(frames_dir)
    for ext in FRAME_EXTENSIONS:
        candidate = base / f"{index:05d}{ext}"
        if candidate.is_file():
            return candidate
    return None


def load_frame(path: str | os.PathLike) -> np.ndarray:
    """One image as uint8 (3, 48, 48), resized when stored at another size."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (FRAME_SIZE, FRAME_SIZE):
            img = img.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy()


def assemble_visual(frames_dir, n: int, frame_index_map: Sequence[int]) -> np.ndarray:
    """Zero-initialized (N, 3, 48, 48) uint8 block filled from the frames that exist.

    Row i takes the image of original frame ``frame_index_map[i]``; missing images
    leave the row at zero.
    """
    if len(frame_index_map) != n:
        raise ShapeMismatch(f"frame map has {len(frame_index_map)} entries for N={n}")
    block = np.zeros((n, 3, FRAME_SIZE, FRAME_SIZE), dtype=np.uint8)
    if frames_dir is None or not Path(frames_dir).is_dir():
        return block
    for i, index in enumerate(frame_index_map):
        path = frame_path(frames_dir, int(index))
        if path is not None:
            block[i] = load_frame(path)
    return block


# -- audio / text alignment ----------------------------------------------------

def fit_length(feat: np.ndarray, n: int) -> np.ndarray:
    """Pad by repeating the last row, or keep the first N rows."""
    feat = np.asarray(feat)
    if feat.ndim != 2:
        raise ShapeMismatch(f"features must be 2-d, got shape {feat.shape}")
    m = feat.shape[0]
    if m == 0:
        raise EmptyFeature("feature matrix has no rows")
    if m >= n:
        return feat[:n].copy()
    return np.concatenate([feat, np.repeat(feat[-1:], n - m, axis=0)], axis=0)


@dataclass(frozen=True)
class WordSpan:
    word: str
    start_s: float
    end_s: float
    feature: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise MalformedRow(f"word {self.word!r}: start {self.start_s} is not before end {self.end_s}")


def populate_word_features(spans: Sequence[WordSpan], n: int, fps: float, dim: int | None = None) -> np.ndarray:
    """Give frame i (at time i/fps) the feature of the word spanning it; zeros elsewhere."""
    if dim is None:
        if not spans:
            raise ValueError("feature width is needed when there are no word spans")
        dim = len(spans[0].feature)
    ordered = sorted(spans, key=lambda s: s.start_s)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start_s < prev.end_s:
            raise OverlappingSpans(f"{prev.word!r} [{prev.start_s}, {prev.end_s}) overlaps "
                                   f"{cur.word!r} [{cur.start_s}, {cur.end_s})")
    out = np.zeros((n, dim))
    times = np.arange(n) / fps
    for span in ordered:
        feature = np.asarray(span.feature, dtype=np.float64)
        if feature.shape != (dim,):
            raise ShapeMismatch(f"word {span.word!r} feature has shape {feature.shape}, expected ({dim},)")
        out[(times >= span.start_s) & (times < span.end_s)] = feature
    return out


def read_word_spans(csv_path, feat_path) -> list[WordSpan]:
    """Word-span CSV ``word,start_s,end_s`` paired row-by-row with an AFF1 feature matrix."""
    feats = load_feature_file(feat_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != feats.shape[0]:
        raise ShapeMismatch(f"{csv_path}: {len(rows)} words but {feats.shape[0]} feature rows")
    spans = []
    for i, row in enumerate(rows):
        try:
            spans.append(WordSpan(row["word"], float(row["start_s"]), float(row["end_s"]), feats[i]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRow(f"{csv_path}: row {i + 2}: {exc}") from None
    return spans


# -- windows -------------------------------------------------------------------

@dataclass(frozen=True)
class WindowConfig:
    """Window length, hop, and the start offset of the extra training pass (None disables it)."""

    window_len: int = 300
    hop: int = 200
    train_offset: int | None = 100

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"need 0 < hop <= window_len, got hop={self.hop}, window_len={self.window_len}")
        if self.train_offset is not None and self.train_offset <= 0:
            raise ValueError("train_offset must be positive")


def _pass_starts(n: int, window_len: int, hop: int, first: int) -> list[int]:
    starts = [first]
    while starts[-1] + window_len < n:
        starts.append(starts[-1] + hop)
    return starts


def make_windows(n: int, cfg: WindowConfig = WindowConfig(), mode: str = "eval") -> list[tuple[int, int]]:
    """Fixed-length ``[start, start + window_len)`` ranges; tails past N are zero-padded later.

    Starts run 0, hop, 2*hop, ... until a window reaches N. Training adds a second
    pass beginning at ``train_offset`` when that offset falls inside the trial.
    """
    if n < 1:
        raise ValueError("a trial needs at least one frame")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    starts = _pass_starts(n, cfg.window_len, cfg.hop, 0)
    if mode == "train" and cfg.train_offset is not None and cfg.train_offset < n:
        starts += _pass_starts(n, cfg.window_len, cfg.hop, cfg.train_offset)
    return [(s, s + cfg.window_len) for s in starts]


# -- normalization and augmentation --------------------------------------------

@dataclass
class NormStats:
    audio_mean: np.ndarray
    audio_std: np.ndarray
    text_mean: np.ndarray
    text_std: np.ndarray
    audio_constant: np.ndarray
    text_constant: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=bool if k.endswith("constant") else np.float64)
                      for k, v in raw.items()})


def _moments(blocks: Iterable[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    blocks = list(blocks)
    stacked = np.concatenate(blocks, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    constant = std < 1e-12
    return mean, np.where(constant, 1.0, std), constant


def compute_norm_stats(trials: Sequence["Trial"]) -> NormStats:
    """Per-dimension audio/text moments over the given (training) trials.

    Dimensions with zero variance are only centered and are flagged.
    """
    if not trials:
        raise ValueError("normalization statistics need at least one trial")
    a_mean, a_std, a_const = _moments(t.audio for t in trials)
    t_mean, t_std, t_const = _moments(t.text for t in trials)
    return NormStats(a_mean, a_std, t_mean, t_std, a_const, t_const)


def normalize_visual(frames: np.ndarray) -> np.ndarray:
    """Map pixels from [0, 1] (or uint8 [0, 255]) to [-1, 1] via (x - 0.5) / 0.5."""
    x = frames.astype(np.float64)
    if frames.dtype == np.uint8:
        x /= 255.0
    return (x - 0.5) / 0.5


def normalize(visual: np.ndarray, audio: np.ndarray, text: np.ndarray,
              stats: NormStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (normalize_visual(visual),
            (audio - stats.audio_mean) / stats.audio_std,
            (text - stats.text_mean) / stats.text_std)


def augment_visual(frames: np.ndarray, mode: str, seed=None, crop: int = 40) -> np.ndarray:
    """Crop (T, 3, 48, 48) frames to ``crop`` pixels.

    Training draws one horizontal flip (p=0.5) and one crop offset for the whole
    window from ``seed`` (an int or a numpy Generator); evaluation takes the
    deterministic center crop.
    """
    if frames.ndim != 4 or frames.shape[1] != 3 or frames.shape[2] != frames.shape[3]:
        raise ShapeMismatch(f"expected (T, 3, S, S) frames, got {frames.shape}")
    size = frames.shape[2]
    if crop > size:
        raise ShapeMismatch(f"crop {crop} larger than frame size {size}")
    if mode == "eval":
        top = left = (size - crop) // 2
        return frames[:, :, top:top + crop, left:left + crop].copy()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random() < 0.5
    top, left = (int(v) for v in rng.integers(0, size - crop + 1, size=2))
    out = frames[:, :, top:top + crop, left:left + crop]
    if flip:
        out = out[..., ::-1]
    return out.copy()


# -- manifest and trials -------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    trial_id: str
    subject_id: str
    partition: str
    fps: float
    frames_dir: str
    annotation_path: str
    audio_feat_path: str
    wordspan_csv: str
    wordfeat_path: str


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise MalformedRow(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            try:
                fps = float(raw["fps"])
            except (TypeError, ValueError):
                raise MalformedRow(f"{path}: line {lineno}: bad fps {raw['fps']!r}") from None
            if not fps > 0:
                raise MalformedRow(f"{path}: line {lineno}: fps must be positive")
            rows.append(ManifestRow(**{**raw, "fps": fps}))
    ids = [r.trial_id for r in rows]
    if len(set(ids)) != len(ids):
        raise MalformedRow(f"{path}: duplicate trial_id")
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for r in rows:
        writer.writerow([getattr(r, f) if f != "fps" else repr(r.fps) for f in MANIFEST_FIELDS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass
class Trial:
    """One aligned trial. ``visual`` stays uint8 to keep memory in check."""

    trial_id: str
    subject_id: str
    partition: str
    fps: float
    labels: np.ndarray | None
    frame_index_map: np.ndarray
    visual: np.ndarray
    audio: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        n = len(self.frame_index_map)
        lengths = {len(self.visual), len(self.audio), len(self.text)}
        if self.labels is not None:
            lengths.add(len(self.labels))
        if lengths != {n}:
            raise ShapeMismatch(f"trial {self.trial_id}: modality lengths {sorted(lengths)} != N={n}")

    def __len__(self) -> int:
        return len(self.frame_index_map)


def _resolve(base: Path, value: str) -> Path | None:
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_trial(row: ManifestRow, base_dir=".") -> Trial:
    """Read and align one manifest row.

    Unlabelled trials (empty annotation_path) take their length from the audio
    feature rows, which are sampled once per video frame.
    """
    base = Path(base_dir)
    audio_raw = load_feature_file(_resolve(base, row.audio_feat_path))
    ann = _resolve(base, row.annotation_path)
    if ann is not None:
        text = ann.read_text(encoding="utf-8")
        labels, fmap = parse_annotations(text)
        total = len(_annotation_rows(text))
    else:
        labels = None
        total = audio_raw.shape[0]
        fmap = np.arange(total, dtype=np.int64)
        if total == 0:
            raise EmptyTrial(f"trial {row.trial_id}: no audio frames")
    span_csv, span_feat = _resolve(base, row.wordspan_csv), _resolve(base, row.wordfeat_path)
    if span_csv is not None and span_feat is not None:
        spans = read_word_spans(span_csv, span_feat)
        dim = load_feature_file(span_feat).shape[1]
        text_feats = populate_word_features(spans, total, row.fps, dim)
    else:
        raise MalformedRow(f"trial {row.trial_id}: word span files are required")
    return Trial(
        trial_id=row.trial_id,
        subject_id=row.subject_id,
        partition=row.partition,
        fps=row.fps,
        labels=labels,
        frame_index_map=fmap,
        visual=assemble_visual(_resolve(base, row.frames_dir), len(fmap), fmap),
        audio=fit_length(audio_raw, total)[fmap],
        text=text_feats[fmap],
    )


def load_trials(manifest_path, trial_ids: Iterable[str] | None = None) -> list[Trial]:
    rows = read_manifest(manifest_path)
    if trial_ids is not None:
        wanted = set(trial_ids)
        rows = [r for r in rows if r.trial_id in wanted]
    base = Path(manifest_path).parent
    return [load_trial(r, base) for r in rows]


def window_arrays(trial: Trial, start: int, end: int, stats: NormStats, mode: str,
                  rng=None, crop: int = 40) -> dict:
    """Normalized model inputs for ``[start, end)``, zero-padded past the trial end.

    Padding is applied after normalization so padded steps are exactly zero.
    ``valid`` is the number of real frames.
    """
    stop = min(end, len(trial))
    if not 0 <= start < stop:
        raise ValueError(f"window [{start}, {end}) holds no frames of a {len(trial)}-frame trial")
    length, valid = end - start, stop - start
    frames = augment_visual(trial.visual[start:stop], mode, rng, crop)
    visual, audio, text = normalize(frames, trial.audio[start:stop], trial.text[start:stop], stats)

    def pad(x):
        if valid == length:
            return x
        return np.concatenate([x, np.zeros((length - valid,) + x.shape[1:])], axis=0)

    out = {"visual": pad(visual), "audio": pad(audio), "text": pad(text), "valid": valid}
    if trial.labels is not None:
        out["labels"] = pad(trial.labels[start:stop])
    return out
