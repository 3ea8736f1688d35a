"""Regression metrics and mean-deviation calibration."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class CalibrationError(ValueError):
    pass


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    r2: float
    spearman: float
    n_samples: int
    space: str = "log"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("r2", "spearman"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for k in ("r2", "spearman"):
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


def spearman(a, b) -> float:
    """Pearson correlation of average-tie ranks; NaN when either side is constant."""
    ra = rankdata(np.asarray(a, dtype=np.float64), method="average")
    rb = rankdata(np.asarray(b, dtype=np.float64), method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return float("nan")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


def metrics(y_true, y_pred, space: str = "log") -> MetricsReport:
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if len(y) != len(p) or len(y) == 0:
        raise ValueError(f"metrics need equal nonzero lengths, got {len(y)} and {len(p)}")
    d = p - y
    mae = float(np.mean(np.abs(d)))
    rmse = float(math.sqrt(np.mean(d * d)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("R^2 undefined for constant y_true", RuntimeWarning, stacklevel=2)
        r2 = float("nan")
    else:
        r2 = 1.0 - float(np.sum(d * d)) / ss_tot
    report = MetricsReport(mae, rmse, r2, spearman(y, p), len(y), space)
    # power-mean inequality; tolerance covers rounding when all |d| are equal
    assert report.rmse >= report.mae - 1e-12 * max(1.0, report.mae)
    return report


@dataclass
class CalibrationStats:
    mu: float
    sigma: float
    mu_target: float
    sigma_target: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise CalibrationError("source prediction std must be positive (degenerate predictions)")
        if not self.sigma_target > 0:
            raise CalibrationError("target std must be positive")

    @classmethod
    def from_samples(cls, y_pred, y_target) -> "CalibrationStats":
        y_pred = np.asarray(y_pred, dtype=np.float64)
        y_target = np.asarray(y_target, dtype=np.float64)
        return cls(float(y_pred.mean()), float(y_pred.std()), float(y_target.mean()), float(y_target.std()))


def calibrate(y_pred, stats: CalibrationStats) -> np.ndarray:
    """Standardize predictions by (mu, sigma), then rescale to (mu_target, sigma_target)."""
    y = np.asarray(y_pred, dtype=np.float64)
    return (y - stats.mu) / stats.sigma * stats.sigma_target + stats.mu_target
