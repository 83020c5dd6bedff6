"""Losses, importance weights, metrics and the signed category bins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "WeightScheme",
    "MetricsReport",
    "CATEGORIES",
    "mse_loss",
    "weighted_loss",
    "loss_residual_gradient",
    "compute_weights",
    "category_of",
    "category_counts",
    "metrics",
]

CATEGORIES = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class WeightScheme:
    """Three-tier weights by ``|y|``; the thresholds double as category bounds.

    ``t1`` defaults to log2(1.5), i.e. a 1.5-fold change.
    """

    t1: float = 0.585
    t2: float = 2.0
    w1: float = 5.0
    w2: float = 50.0

    def __post_init__(self):
        if not (0 < self.t1 < self.t2):
            raise ConfigError(f"thresholds must satisfy 0 < t1 < t2, got ({self.t1}, {self.t2})")
        if not (self.w2 >= self.w1 >= 1):
            raise ConfigError(f"tier weights must satisfy w2 >= w1 >= 1, got ({self.w1}, {self.w2})")

    @property
    def thresholds(self):
        return (self.t1, self.t2)


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, yhat


def mse_loss(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    r = y - yhat
    return float(np.mean(r * r))


def weighted_loss(y, yhat, w, lam: float = 0.0) -> float:
    """Weighted mean squared residual minus ``lam`` times the prediction variance.

    ``Var`` is the population variance of ``yhat`` over the batch.
    """
    y, yhat = _pair(y, yhat)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    if lam < 0:
        raise ConfigError("lambda must be non-negative", flag="--lam")
    r = y - yhat
    loss = float(np.mean(w * r * r))
    if lam:
        loss -= lam * float(np.var(yhat))
    return loss


def loss_residual_gradient(y, yhat, w, lam: float):
    """Loss value and its derivative with respect to each prediction."""
    n = y.shape[0]
    # overflow surfaces as a non-finite loss, which the caller reports
    with np.errstate(over="ignore", invalid="ignore"):
        r = yhat - y
        loss = float(np.mean(w * r * r))
        g = (2.0 / n) * w * r
        if lam:
            centered = yhat - yhat.mean()
            loss -= lam * float(np.mean(centered * centered))
            g = g - (2.0 * lam / n) * centered
    return loss, g


def compute_weights(y, scheme: WeightScheme = WeightScheme()):
    y = np.abs(np.asarray(y, dtype=np.float64))
    w = np.ones_like(y)
    w[y >= scheme.t1] = scheme.w1
    w[y >= scheme.t2] = scheme.w2
    return w


def category_of(values, thresholds=(0.585, 2.0)):
    """Signed 5-way bin of each value: -2, -1, 0, +1, +2."""
    t1, t2 = thresholds
    if not (0 < t1 < t2):
        raise ConfigError(f"thresholds must satisfy 0 < t1 < t2, got {thresholds}")
    v = np.asarray(values, dtype=np.float64)
    cat = np.zeros(v.shape, dtype=np.int8)
    cat[v >= t1] = 1
    cat[v >= t2] = 2
    cat[v <= -t1] = -1
    cat[v <= -t2] = -2
    return cat


def category_counts(values, thresholds=(0.585, 2.0)) -> np.ndarray:
    """Counts for categories (-2, -1, 0, 1, 2), in that order."""
    return np.bincount(category_of(values, thresholds).astype(np.int64) + 2, minlength=5)


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    weighted_mae: float
    max_ae: float
    n: int
    histogram: tuple

    def as_row(self):
        return (self.mse, self.mae, self.weighted_mae, self.max_ae)


def metrics(y, yhat, w=None, thresholds=(0.585, 2.0)) -> MetricsReport:
    """MSE, MAE, WeightedMAE and MaxAE plus the category histogram of ``yhat``."""
    y, yhat = _pair(y, yhat)
    w = np.ones_like(y) if w is None else np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    ae = np.abs(y - yhat)
    return MetricsReport(
        mse=float(np.mean(ae * ae)),
        mae=float(np.mean(ae)),
        weighted_mae=float(np.mean(w * ae)),
        max_ae=float(ae.max()),
        n=int(y.size),
        histogram=tuple(int(c) for c in category_counts(yhat, thresholds)),
    )
