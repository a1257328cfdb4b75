"""Training and synthetic-data configuration, loadable from TOML.

TOML keys mirror the dataclass field names. A ``[model]`` table in a training
config overrides :class:`~coattn_affect.model.ModelConfig` fields.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields

from .model import BACKBONE_STAGES, HEAD_GROUP, ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_UNFREEZE_STAGES = (HEAD_GROUP, BACKBONE_STAGES[2], BACKBONE_STAGES[1])


def _check_keys(cls, raw: dict) -> None:
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    window_len: int = 300
    hop: int = 200
    train_offset: int | None = 100
    lr: float = 1e-5
    min_lr: float = 1e-7
    weight_decay: float = 0.001
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    warmup_epochs: int = 10
    max_epochs: int = 100
    early_stop_patience: int = 10
    improve_tol: float = 1e-5
    unfreeze_stages: tuple[str, ...] = DEFAULT_UNFREEZE_STAGES
    val_metric: str = "per_trial"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0 < self.min_lr < self.lr:
            raise ValueError(f"need 0 < min_lr < lr, got min_lr={self.min_lr}, lr={self.lr}")
        counts = ("batch_size", "window_len", "hop", "plateau_patience", "warmup_epochs",
                  "max_epochs", "early_stop_patience")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.unfreeze_stages:
            raise ValueError("unfreeze_stages must name at least one parameter group")
        if self.val_metric not in ("per_trial", "global"):
            raise ValueError("val_metric must be 'per_trial' or 'global'")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["unfreeze_stages"] = list(self.unfreeze_stages)
        out["model"] = self.model.to_dict()
        if out["train_offset"] is None:
            del out["train_offset"]  # TOML has no null; absence means "no extra pass"
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        _check_keys(cls, raw)
        if "model" in raw:
            raw["model"] = ModelConfig.from_dict(raw["model"])
        if "unfreeze_stages" in raw:
            raw["unfreeze_stages"] = tuple(raw["unfreeze_stages"])
        if raw.get("train_offset", 1) in (0, False):
            raw["train_offset"] = None
        return cls(**raw)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 12
    trials_per_subject: int = 2
    frames_per_trial: int = 900
    signal_to_noise: float = 2.0
    seed: int = 0
    fps: float = 30.0
    audio_dim: int = 128
    text_dim: int = 768
    sentinel_rate: float = 0.05
    val_subjects: int = 2

    def __post_init__(self):
        for name in ("n_subjects", "trials_per_subject", "frames_per_trial", "fps", "audio_dim", "text_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.signal_to_noise > 0 or math.isnan(self.signal_to_noise):
            raise ValueError("signal_to_noise must be positive")
        if not 0 <= self.sentinel_rate < 1:
            raise ValueError("sentinel_rate must lie in [0, 1)")
        if not 0 <= self.val_subjects < self.n_subjects:
            raise ValueError("val_subjects must leave at least one training subject")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        _check_keys(cls, raw)
        return cls(**raw)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(load_toml(path))


def load_synth_spec(path) -> SynthSpec:
    return SynthSpec.from_dict(load_toml(path))
