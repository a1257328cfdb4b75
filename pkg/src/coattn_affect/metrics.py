"""Concordance correlation coefficient, as a metric and as a training loss.

Moments are population moments (divide by N).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import LengthMismatch
from .tensor import Tensor

DEGENERATE_DENOMINATOR = 1e-12


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise LengthMismatch(f"sequences differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise LengthMismatch(f"CCC needs at least 2 points, got {x.size}")
    return x, y


def ccc_flagged(x, y) -> tuple[float, bool]:
    """Lin's CCC plus a flag telling whether the denominator was degenerate.

    A degenerate pair (denominator below 1e-12) scores 0 instead of raising.
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = np.mean(dx * dy)
    denom = np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2
    if denom < DEGENERATE_DENOMINATOR:
        return 0.0, True
    return float(2.0 * cov / denom), False


def ccc(x, y) -> float:
    return ccc_flagged(x, y)[0]


def pearson(x, y) -> float:
    """Diagnostic only; 0 when either sequence is constant."""
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    return 0.0 if denom == 0 else float(np.sum(dx * dy) / denom)


def ccc_loss(pred: Tensor, gold) -> Tensor:
    """``1 - CCC(pred, gold)`` built from tape ops so it back-propagates into ``pred``."""
    gold = np.asarray(gold, dtype=np.float64).reshape(-1)
    _pair(pred.data, gold)
    flat = tc.reshape(pred, (gold.size,))
    g_mean = gold.mean()
    g_centered = gold - g_mean
    g_var = float(np.mean(g_centered * g_centered))

    p_mean = tc.mean(flat)
    cov = tc.mean(tc.mul(tc.sub(flat, p_mean), Tensor(g_centered)))
    gap = tc.add_scalar(p_mean, -g_mean)
    denom = tc.add(tc.add_scalar(tc.var(flat), g_var), tc.mul(gap, gap))
    if float(denom.data) < DEGENERATE_DENOMINATOR:
        # keeps the graph connected while contributing no gradient
        return tc.add_scalar(tc.mul_scalar(p_mean, 0.0), 1.0)
    return tc.add_scalar(tc.mul_scalar(tc.div(cov, denom), -2.0), 1.0)


@dataclass(frozen=True)
class CccReport:
    ccc_valence: float
    ccc_arousal: float

    @property
    def mean_ccc(self) -> float:
        return (self.ccc_valence + self.ccc_arousal) / 2.0

    def as_dict(self) -> dict[str, float]:
        return {"ccc_valence": self.ccc_valence, "ccc_arousal": self.ccc_arousal,
                "mean": self.mean_ccc}


def evaluate(pred: Sequence, gold: Sequence) -> CccReport:
    """Score (valence, arousal) predictions against gold labels."""
    (pv, pa), (gv, ga) = pred, gold
    return CccReport(ccc(pv, gv), ccc(pa, ga))
