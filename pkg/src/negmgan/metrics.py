"""Scores for unknown-class extraction and cluster-count estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def confusion(predicted, truth):
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return ConfusionCounts(
        int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t))
    )


def f1_unknown(predicted, truth):
    """F1 with the unknown class as positive; 0 when precision + recall is 0."""
    c = confusion(predicted, truth)
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def rmse(predicted, truth):
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if len(p) == 0:
        raise ValueError("need at least one prediction")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def s_r2(rmse_m, rmse_bl):
    """Symmetric, bounded comparison of a model's RMSE with a baseline's.

    1 when the model is perfect and the baseline is not, 0 on a tie, -1 when
    the roles are reversed.
    """
    if rmse_m < 0 or rmse_bl < 0:
        raise ValueError("RMSE values must be non-negative")
    if rmse_m < rmse_bl:
        return 1.0 - rmse_m / rmse_bl
    if rmse_m > rmse_bl:
        return rmse_bl / rmse_m - 1.0
    return 0.0
