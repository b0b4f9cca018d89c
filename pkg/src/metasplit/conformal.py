"""Validation-based conformal prediction for softmax classifiers.

Scores are ``1 - p(label)``. The threshold is the ceil((n+1)(1-alpha))-th
smallest calibration score, and a prediction set keeps every class whose
score does not exceed it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .nncore import ConfigError


@dataclass(frozen=True)
class CPConfig:
    alpha: float = 0.1
    cal_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.cal_fraction < 1:
            raise ConfigError(f"cal_fraction must lie in (0, 1), got {self.cal_fraction}")


@dataclass(frozen=True)
class PredictionSet:
    classes: Tuple[int, ...]
    threshold: float

    def __contains__(self, y) -> bool:
        return int(y) in self.classes

    def __len__(self) -> int:
        return len(self.classes)


def nc_scores(probs: np.ndarray, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label out of range [0, {probs.shape[1]})")
    return np.clip(1.0 - probs[np.arange(len(labels)), labels], 0.0, 1.0)


def quantile_rank(n: int, alpha: float) -> int:
    """1-indexed order statistic used as the threshold."""
    return math.ceil((n + 1) * (1 - alpha) - 1e-12)


def conformal_threshold(scores, alpha: float) -> float:
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(scores)
    if n == 0:
        raise ConfigError("no calibration scores")
    k = quantile_rank(n, alpha)
    if k > n:
        return math.inf
    return float(scores[max(k, 1) - 1])


def prediction_set(probs_row, q_hat: float) -> PredictionSet:
    scores = 1.0 - np.asarray(probs_row, dtype=np.float64)
    return PredictionSet(tuple(int(i) for i in np.flatnonzero(scores <= q_hat)), q_hat)


def prediction_sets(probs: np.ndarray, q_hat: float) -> List[PredictionSet]:
    return [prediction_set(row, q_hat) for row in probs]


def coverage(sets: Sequence[PredictionSet], labels) -> float:
    labels = list(labels)
    if not labels:
        return float("nan")
    return sum(int(y) in s.classes for s, y in zip(sets, labels)) / len(labels)


def inefficiency(sets: Sequence[PredictionSet]) -> float:
    if not sets:
        return float("nan")
    return float(np.mean([len(s) for s in sets]))


@dataclass
class CPResult:
    n_cal: int
    alpha: float
    q_hat: float
    coverage: float
    inefficiency: float


def split_calibrate(probs: np.ndarray, labels, cfg: CPConfig,
                    rng: np.random.Generator) -> CPResult:
    """Random calibration/validation split, threshold on one half, evaluate on the other."""
    labels = np.asarray(labels)
    n = len(labels)
    n_cal = int(round(cfg.cal_fraction * n))
    if not 1 <= n_cal < n:
        raise ConfigError(f"cannot split {n} examples with fraction {cfg.cal_fraction}")
    perm = rng.permutation(n)
    cal, val = perm[:n_cal], perm[n_cal:]
    q_hat = conformal_threshold(nc_scores(probs[cal], labels[cal]), cfg.alpha)
    sets = prediction_sets(probs[val], q_hat)
    return CPResult(n_cal, cfg.alpha, q_hat, coverage(sets, labels[val]), inefficiency(sets))


CP_COLUMNS = ("task_id", "n_cal", "alpha", "q_hat", "coverage", "inefficiency")
