"""Learning-rate schedule: linear warmup, plateau decay, staged unfreezing, early stop.

``scheduler_step`` is pure: it maps the state after an epoch plus that epoch's
"improved" flag to the state for the next epoch and any events raised. The
learning rate a state carries is the one the next epoch trains with.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

from .config import TrainConfig


@dataclass(frozen=True)
class UnfreezeEvent:
    stage_index: int
    group: str


@dataclass(frozen=True)
class PlateauEvent:
    new_lr: float


@dataclass(frozen=True)
class StopEvent:
    reason: str  # "early_stop" or "schedule_exhausted"


Event = Union[UnfreezeEvent, PlateauEvent, StopEvent]


@dataclass(frozen=True)
class SchedulerState:
    current_lr: float
    epoch: int = 1
    plateau_counter: int = 0
    unfreeze_stage_index: int = 0
    best_val_ccc: float = float("-inf")
    best_checkpoint_ref: str | None = None
    early_stop_counter: int = 0


def warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    return epoch / cfg.warmup_epochs * cfg.lr


def initial_state(cfg: TrainConfig) -> SchedulerState:
    return SchedulerState(current_lr=warmup_lr(1, cfg))


def is_improvement(val_ccc: float, best: float, cfg: TrainConfig) -> bool:
    return val_ccc >= best + cfg.improve_tol


def scheduler_step(state: SchedulerState, improved: bool, cfg: TrainConfig) -> tuple[SchedulerState, list[Event]]:
    """Advance past epoch ``state.epoch``.

    Warmup epochs never count towards plateau or early stop; max_epochs is
    left to the training loop. Once lr decays below ``min_lr`` the next
    unfreeze stage begins with lr, plateau and early-stop counters reset; with
    no stage left the run stops.
    """
    events: list[Event] = []
    nxt = state.epoch + 1
    if state.epoch <= cfg.warmup_epochs:
        lr = warmup_lr(nxt, cfg) if nxt <= cfg.warmup_epochs else cfg.lr
        return replace(state, epoch=nxt, current_lr=lr), events

    if improved:
        return replace(state, epoch=nxt, plateau_counter=0, early_stop_counter=0), events

    lr = state.current_lr
    plateau = state.plateau_counter + 1
    early = state.early_stop_counter + 1
    stage = state.unfreeze_stage_index
    if plateau >= cfg.plateau_patience:
        lr *= cfg.plateau_factor
        plateau = 0
        events.append(PlateauEvent(lr))
        if lr < cfg.min_lr:
            if stage + 1 < len(cfg.unfreeze_stages):
                stage += 1
                lr, early = cfg.lr, 0
                events.append(UnfreezeEvent(stage, cfg.unfreeze_stages[stage]))
            else:
                events.append(StopEvent("schedule_exhausted"))
    if early >= cfg.early_stop_patience and not any(isinstance(e, StopEvent) for e in events):
        events.append(StopEvent("early_stop"))
    return replace(state, epoch=nxt, current_lr=lr, plateau_counter=plateau,
                   unfreeze_stage_index=stage, early_stop_counter=early), events


def lr_trace(flags, cfg: TrainConfig) -> list[float]:
    """Learning rate of each epoch for a given sequence of improved flags, ignoring stops."""
    state = initial_state(cfg)
    trace = []
    for flag in flags:
        trace.append(state.current_lr)
        state, _ = scheduler_step(state, flag, cfg)
    return trace
