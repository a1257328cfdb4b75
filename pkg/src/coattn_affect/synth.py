"""Seeded synthetic corpus standing in for real recordings.

Each trial has smooth latent valence/arousal curves. Frames, audio features
and word features each see the latent pair through their own fixed random
linear map, plus Gaussian noise whose scale is set by ``signal_to_noise``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SynthSpec
from .data import FRAME_SIZE, SENTINEL, ManifestRow, write_manifest
from .fileio import write_feature_file

LATENT_STD = 0.3  # typical spread of the latent curves; noise is scaled against it
PIXEL_GAIN = 60.0


@dataclass
class SynthResult:
    manifest_path: Path
    sentinel_rows: dict[str, np.ndarray]  # trial_id -> annotation rows set to -5
    latents: dict[str, np.ndarray]  # trial_id -> (frames, 2) clean curves


def latent_curves(n: int, fps: float, rng: np.random.Generator) -> np.ndarray:
    """(n, 2) sums of four slow random sines, clipped to [-1, 1]."""
    t = np.arange(n) / fps
    out = np.zeros((n, 2))
    for d in range(2):
        for _ in range(4):
            amp = rng.uniform(0.1, 0.3)
            freq = rng.uniform(0.02, 0.25)
            out[:, d] += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return np.clip(out, -1.0, 1.0)


def _noise_scale(spec: SynthSpec) -> float:
    return 0.0 if math.isinf(spec.signal_to_noise) else LATENT_STD / spec.signal_to_noise


def _word_spans(duration: float, rng: np.random.Generator) -> list[tuple[float, float]]:
    spans, t = [], rng.uniform(0.0, 0.5)
    while t < duration:
        end = t + rng.uniform(0.15, 0.6)
        spans.append((round(t, 4), round(end, 4)))
        t = end + rng.uniform(0.05, 0.5)
    return spans


def generate_synth(spec: SynthSpec, out_dir) -> SynthResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_trials = spec.n_subjects * spec.trials_per_subject
    seeds = np.random.SeedSequence(spec.seed).spawn(n_trials + 1)
    shared = np.random.default_rng(seeds[0])
    audio_map = shared.standard_normal((2, spec.audio_dim))
    text_map = shared.standard_normal((2, spec.text_dim))
    color_map = shared.standard_normal((2, 3)) / np.sqrt(2)
    subject_texture = shared.uniform(-25, 25, (spec.n_subjects, 3, FRAME_SIZE, FRAME_SIZE))
    noise = _noise_scale(spec)

    rows, sentinels, latents = [], {}, {}
    for s in range(spec.n_subjects):
        partition = "validation" if s >= spec.n_subjects - spec.val_subjects else "train"
        for j in range(spec.trials_per_subject):
            index = s * spec.trials_per_subject + j
            tid = f"trial{index:03d}"
            rng = np.random.default_rng(seeds[index + 1])
            n = spec.frames_per_trial
            n_audio = max(1, n + int(rng.integers(-3, 4)))  # extractors rarely agree on length
            latent = latent_curves(max(n, n_audio), spec.fps, rng)
            tdir = out / "trials" / tid
            (tdir / "frames").mkdir(parents=True, exist_ok=True)

            labels = latent[:n].copy()
            dropped = np.flatnonzero(rng.random(n) < spec.sentinel_rate)
            if dropped.size == n:
                dropped = dropped[1:]
            labels[dropped] = SENTINEL
            buf = io.StringIO()
            buf.write("valence,arousal\n")
            for v, a in labels:
                buf.write(f"{v:.6f},{a:.6f}\n")
            (tdir / "annotations.csv").write_text(buf.getvalue(), encoding="utf-8")

            audio = latent[:n_audio] @ audio_map + noise * rng.standard_normal((n_audio, spec.audio_dim))
            write_feature_file(tdir / "audio.aff", audio)

            spans = _word_spans(n / spec.fps, rng)
            feats = np.zeros((len(spans), spec.text_dim))
            for k, (start, end) in enumerate(spans):
                frames = np.arange(math.ceil(start * spec.fps), min(n, math.ceil(end * spec.fps)))
                centre = latent[frames].mean(axis=0) if frames.size else latent[min(n - 1, int(start * spec.fps))]
                feats[k] = centre @ text_map + noise * rng.standard_normal(spec.text_dim)
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["word", "start_s", "end_s"])
            for k, (start, end) in enumerate(spans):
                writer.writerow([f"w{int(rng.integers(0, 500))}", f"{start:.4f}", f"{end:.4f}"])
            (tdir / "words.csv").write_text(buf.getvalue(), encoding="utf-8")
            if spans:
                write_feature_file(tdir / "words.aff", feats)
            else:
                write_feature_file(tdir / "words.aff", np.zeros((0, spec.text_dim)))

            shade = latent[:n] @ color_map  # (n, 3)
            for i in range(n):
                pixels = (127.5 + subject_texture[s] + PIXEL_GAIN * shade[i][:, None, None]
                          + PIXEL_GAIN * noise * rng.standard_normal((3, FRAME_SIZE, FRAME_SIZE)))
                img = np.clip(np.rint(pixels), 0, 255).astype(np.uint8).transpose(1, 2, 0)
                Image.fromarray(img).save(tdir / "frames" / f"{i:05d}.png", compress_level=1)

            rel = Path("trials") / tid
            rows.append(ManifestRow(tid, f"subj{s:02d}", partition, float(spec.fps),
                                    str(rel / "frames"), str(rel / "annotations.csv"), str(rel / "audio.aff"),
                                    str(rel / "words.csv"), str(rel / "words.aff")))
            sentinels[tid] = dropped
            latents[tid] = latent[:n]
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return SynthResult(manifest, sentinels, latents)
