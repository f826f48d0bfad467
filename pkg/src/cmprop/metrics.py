"""Regression metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RAE_THRESHOLDS = (1.0, 5.0, 10.0, 15.0)


class MetricError(ValueError):
    pass


def _pair(y, yhat, min_len=1):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.shape[0]} vs {yhat.shape[0]}")
    if y.size < min_len:
        raise MetricError(f"need at least {min_len} samples")
    return y, yhat


def r2(y, yhat) -> float:
    y, yhat = _pair(y, yhat, 2)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise MetricError("R^2 undefined for constant targets")
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


def adjusted_r2(r2_value: float, n: int, k: int) -> float:
    if n <= k + 1:
        raise MetricError(f"adjusted R^2 needs n > k + 1 (n={n}, k={k})")
    return 1.0 - (1.0 - r2_value) * (n - 1) / (n - k - 1)


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mape(y, yhat) -> float:
    """Mean absolute percentage error as a fraction (0.033 means 3.3 %)."""
    y, yhat = _pair(y, yhat)
    if np.any(y == 0):
        raise MetricError("MAPE undefined when a target is zero")
    return float(np.mean(np.abs((y - yhat) / y)))


def relative_errors(y, yhat) -> np.ndarray:
    """Per-sample relative absolute error in percent."""
    y, yhat = _pair(y, yhat)
    if np.any(y <= 0):
        raise MetricError("relative error needs strictly positive targets")
    return 100.0 * np.abs(yhat - y) / y


def rape_fractions(y, yhat, thresholds=RAE_THRESHOLDS) -> dict[float, float]:
    """Fraction of samples whose relative error is below each percent threshold."""
    rae = relative_errors(y, yhat)
    return {float(t): float(np.mean(rae < t)) for t in sorted(thresholds)}


@dataclass
class MetricReport:
    n: int
    k: int
    r2: float
    adjusted_r2: float
    rmse: float
    mae: float
    mape: float
    rape_fractions: dict = field(default_factory=dict)

    FIELDS = ("n", "k", "r2", "adjusted_r2", "rmse", "mae", "mape")

    def to_text(self) -> str:
        lines = [f"{f}={getattr(self, f)}" for f in self.FIELDS]
        lines += [f"rae_within_{t:g}pct={v}" for t, v in self.rape_fractions.items()]
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.FIELDS + tuple(f"rae_{t:g}" for t in self.rape_fractions))

    def csv_row(self) -> str:
        vals = [str(getattr(self, f)) for f in self.FIELDS]
        vals += [str(v) for v in self.rape_fractions.values()]
        return ",".join(vals)


def metric_report(y, yhat, k: int = 0) -> MetricReport:
    """All metrics at once; undefined entries (constant y, n <= k+1, y <= 0) become NaN."""
    y, yhat = _pair(y, yhat)
    n = y.size

    def safe(fn, *args):
        try:
            return fn(*args)
        except MetricError:
            return float("nan")

    r = safe(r2, y, yhat)
    adj = safe(adjusted_r2, r, n, k) if not np.isnan(r) else float("nan")
    fr = {}
    if np.all(y > 0):
        fr = rape_fractions(y, yhat)
    return MetricReport(n, k, r, adj, rmse(y, yhat), mae(y, yhat), safe(mape, y, yhat), fr)
