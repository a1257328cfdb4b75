"""Per-fold training loop.

Every epoch ends with validation. A non-improving epoch rolls the model back
to the best weights seen so far before the next epoch starts, and the
scheduler decides the next learning rate, unfreezes backbone stages and stops
the run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .config import TrainConfig
from .data import NormStats, Trial, WindowConfig, compute_norm_stats, make_windows, window_arrays
from .errors import EmptyFold
from .folds import FoldPlan
from .metrics import ccc, ccc_loss
from .model import CoAttentionRegressor, ModelConfig
from .optim import AdamW
from .predict import predict_trial, save_model_dir
from .schedule import (SchedulerState, StopEvent, UnfreezeEvent, initial_state, is_improvement,
                       scheduler_step)
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Validation:
    mean: float
    valence: float
    arousal: float


@dataclass
class FoldResult:
    best_state: dict[str, np.ndarray]
    best_val_ccc: float
    log: list[dict]
    stop_reason: str
    model_cfg: ModelConfig
    stats: NormStats
    checkpoint_dir: Path | None


def _event_text(event) -> str:
    if isinstance(event, UnfreezeEvent):
        return f"unfreeze:{event.group}"
    if isinstance(event, StopEvent):
        return f"stop:{event.reason}"
    return f"plateau:{event.new_lr!r}"


class FoldTrainer:
    """Trains one fold. ``hooks`` run at the start of every epoch as ``hook(trainer, epoch)``."""

    def __init__(self, trials: Sequence[Trial], plan: FoldPlan, fold_idx: int, cfg: TrainConfig,
                 out_dir=None):
        train_ids, val_ids = plan.split(fold_idx)
        by_id = {t.trial_id: t for t in trials}
        self.train_trials = [by_id[t] for t in train_ids if t in by_id]
        self.val_trials = [by_id[t] for t in val_ids if t in by_id]
        if not self.train_trials or not self.val_trials:
            raise EmptyFold(f"fold {fold_idx}: {len(self.train_trials)} training and "
                            f"{len(self.val_trials)} validation trials loaded")
        if any(t.labels is None for t in self.train_trials + self.val_trials):
            raise EmptyFold(f"fold {fold_idx}: every training and validation trial needs labels")
        self.cfg = cfg
        self.fold_idx = fold_idx
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.windows = WindowConfig(cfg.window_len, cfg.hop, cfg.train_offset)
        self.stats = compute_norm_stats(self.train_trials)
        first = self.train_trials[0]
        self.model_cfg = replace(cfg.model, audio_dim=first.audio.shape[1], text_dim=first.text.shape[1])
        self.model = CoAttentionRegressor(self.model_cfg)
        self.rng = np.random.default_rng([cfg.seed, fold_idx])
        self.optimizer = AdamW(self.model.parameters(), cfg.lr, cfg.weight_decay)
        self.state: SchedulerState = initial_state(cfg)
        self.best_state: dict[str, np.ndarray] | None = None
        self.hooks: list[Callable[["FoldTrainer", int], None]] = []
        self.log: list[dict] = []
        self.model.set_trainable(self.trainable_groups())
        self._train_windows = [(t, s, e) for t in self.train_trials
                               for s, e in make_windows(len(t), self.windows, "train")
                               if min(e, len(t)) - s >= 2]

    def trainable_groups(self) -> list[str]:
        return list(self.cfg.unfreeze_stages[:self.state.unfreeze_stage_index + 1])

    # -- one epoch -------------------------------------------------------------

    def window_loss(self, trial: Trial, start: int, end: int) -> Tensor:
        arr = window_arrays(trial, start, end, self.stats, "train", self.rng, self.model_cfg.crop_size)
        out = self.model(Tensor(arr["visual"]), Tensor(arr["audio"]), Tensor(arr["text"]), self.rng)
        valid = arr["valid"]
        gold = arr["labels"][:valid]
        loss_v = ccc_loss(tc.slice_axis(out.valence, 0, valid), gold[:, 0])
        loss_a = ccc_loss(tc.slice_axis(out.arousal, 0, valid), gold[:, 1])
        return tc.mul_scalar(tc.add(loss_v, loss_a), 0.5)

    def train_epoch(self) -> float:
        self.model.train()
        self.optimizer.lr = self.state.current_lr
        order = self.rng.permutation(len(self._train_windows))
        total, steps = 0.0, 0
        for b in range(0, len(order), self.cfg.batch_size):
            batch = [self._train_windows[i] for i in order[b:b + self.cfg.batch_size]]
            with GradTape() as tape:
                losses = [self.window_loss(*w) for w in batch]
                loss = losses[0]
                for extra in losses[1:]:
                    loss = tc.add(loss, extra)
                loss = tc.mul_scalar(loss, 1.0 / len(losses))
                self.optimizer.zero_grad()
                tape.backward(loss)
            self.optimizer.step()
            total += loss.item()
            steps += 1
        return total / max(steps, 1)

    def validate(self) -> Validation:
        preds = [predict_trial(self.model, t, self.stats, self.windows) for t in self.val_trials]
        golds = [t.labels for t in self.val_trials]
        if self.cfg.val_metric == "global":
            p, g = np.concatenate(preds), np.concatenate(golds)
            v, a = ccc(p[:, 0], g[:, 0]), ccc(p[:, 1], g[:, 1])
        else:
            v = float(np.mean([ccc(p[:, 0], g[:, 0]) for p, g in zip(preds, golds)]))
            a = float(np.mean([ccc(p[:, 1], g[:, 1]) for p, g in zip(preds, golds)]))
        return Validation((v + a) / 2.0, v, a)

    # -- the loop --------------------------------------------------------------

    def _save_best(self) -> str:
        if self.out_dir is None:
            return f"memory:epoch{self.state.epoch}"
        save_model_dir(self.out_dir, self.best_state, self.model_cfg, self.stats, self.windows,
                       {"fold": self.fold_idx, "epoch": self.state.epoch})
        return str(self.out_dir / "best.afwt")

    def run(self) -> FoldResult:
        stop_reason = "max_epochs"
        for epoch in range(1, self.cfg.max_epochs + 1):
            for hook in self.hooks:
                hook(self, epoch)
            lr = self.state.current_lr
            train_loss = self.train_epoch()
            val = self.validate()
            improved = is_improvement(val.mean, self.state.best_val_ccc, self.cfg)
            if improved:
                self.best_state = self.model.state_dict()
                self.state = replace(self.state, best_val_ccc=val.mean, best_checkpoint_ref=self._save_best())
            elif self.best_state is not None:
                self.model.load_state_dict(self.best_state)
            stage_before = self.state.unfreeze_stage_index
            self.state, events = scheduler_step(self.state, improved, self.cfg)
            if self.state.unfreeze_stage_index != stage_before:
                self.model.set_trainable(self.trainable_groups())
            record = {
                "epoch": epoch, "lr": lr, "train_loss": train_loss, "val_ccc": val.mean,
                "val_ccc_valence": val.valence, "val_ccc_arousal": val.arousal, "improved": improved,
                "best_val_ccc": self.state.best_val_ccc, "next_lr": self.state.current_lr,
                "stage": self.state.unfreeze_stage_index, "events": [_event_text(e) for e in events],
            }
            self.log.append(record)
            log.info("fold %d epoch %d lr %.3g loss %.4f val %.4f (v %.4f a %.4f)%s%s", self.fold_idx, epoch,
                     lr, train_loss, val.mean, val.valence, val.arousal, " *" if improved else "",
                     "".join(f" [{t}]" for t in record["events"]))
            stops = [e for e in events if isinstance(e, StopEvent)]
            if stops:
                stop_reason = stops[0].reason
                break
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "log.jsonl", "w", encoding="utf-8") as fh:
                for rec in self.log:
                    fh.write(json.dumps(rec) + "\n")
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return FoldResult(self.best_state, self.state.best_val_ccc, self.log, stop_reason, self.model_cfg,
                          self.stats, self.out_dir)


def train_fold(trials: Sequence[Trial], fold_plan: FoldPlan, fold_idx: int, cfg: TrainConfig,
               out_dir=None) -> FoldResult:
    return FoldTrainer(trials, fold_plan, fold_idx, cfg, out_dir).run()
