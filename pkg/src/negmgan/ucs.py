"""Unknown-class scoring from reconstruction losses, and batch thresholding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def reconstruction_loss(model, x):
    """Per-row Euclidean norm of ``x - G(E(x))``."""
    x = np.asarray(x, dtype=np.float64)
    return np.linalg.norm(x - model.reconstruct(x), axis=1)


@dataclass
class BaselineTable:
    class_names: list
    medians: np.ndarray

    def __post_init__(self):
        self.medians = np.asarray(self.medians, dtype=np.float64)
        if len(self.class_names) != len(self.medians):
            raise ValueError("one median per class is required")
        if not np.all(np.isfinite(self.medians)) or np.any(self.medians < 0):
            raise ValueError("baselines must be finite and non-negative")

    def __len__(self):
        return len(self.medians)


def baselines_from_losses(losses, labels, class_names=None):
    labels = np.asarray(labels).astype(str)
    if class_names is None:
        class_names = list(dict.fromkeys(labels.tolist()))
    medians = []
    for c in class_names:
        sel = losses[labels == c]
        if len(sel) == 0:
            raise ValueError(f"class {c!r} has no training instances")
        medians.append(np.median(sel))
    return BaselineTable(list(class_names), np.array(medians))


def fit_baselines(model, train):
    """Median training reconstruction loss for each known class."""
    losses = reconstruction_loss(model, train.data)
    return baselines_from_losses(losses, train.labels, train.class_names)


def ucs_scores(losses, baselines):
    """Distance from each loss to the closest per-class baseline."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    med = baselines.medians if isinstance(baselines, BaselineTable) else np.asarray(baselines)
    if len(losses) == 0:
        return np.zeros(0)
    return np.abs(losses[:, None] - med[None, :]).min(axis=1)


@dataclass
class ThresholdPolicy:
    """Batch thresholding state.

    The first batch flags the top ``first_batch_quantile`` share of scores,
    or everything above ``initial_threshold`` when that is set.  Later
    batches flag the share given by an exponential moving average of the
    shares flagged so far.
    """

    first_batch_quantile: float = 0.10
    ema_decay: float = 0.7
    initial_threshold: float | None = None
    estimate: float | None = None

    def __post_init__(self):
        if not 0.0 < self.first_batch_quantile < 1.0:
            raise ValueError("first_batch_quantile must lie in (0, 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


def _rank_threshold(scores, fraction):
    n_flag = int(round(fraction * len(scores)))
    if n_flag <= 0:
        return float(np.max(scores))
    if n_flag >= len(scores):
        return float(np.min(scores)) - 1.0
    ordered = np.sort(scores, kind="stable")[::-1]
    return float(ordered[n_flag])


def extract_unknown(scores, policy: ThresholdPolicy, batch_index):
    """Split a batch into known / potential-unknown indices.

    Returns ``(kc_indices, uc_indices, threshold, policy)``; the policy is
    updated in place and returned for convenience.  Scores equal to the
    threshold stay known.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        raise ValueError("empty batch")
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    if batch_index == 0 or policy.estimate is None:
        if policy.initial_threshold is not None:
            threshold = float(policy.initial_threshold)
        else:
            threshold = _rank_threshold(scores, policy.first_batch_quantile)
    else:
        threshold = _rank_threshold(scores, policy.estimate)
    flagged = scores > threshold
    frac = float(flagged.mean())
    if policy.estimate is None:
        policy.estimate = frac
    else:
        policy.estimate = policy.ema_decay * policy.estimate + (1.0 - policy.ema_decay) * frac
    return np.flatnonzero(~flagged), np.flatnonzero(flagged), threshold, policy


def calibrate_threshold(train_scores, coverage=0.99):
    """A UCS value exceeded by only ``1 - coverage`` of training scores."""
    return float(np.quantile(np.asarray(train_scores, dtype=np.float64), coverage))
