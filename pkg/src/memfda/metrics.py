"""Monte Carlo performance measures over replicate coefficient-curve fits:
grid-averaged squared bias, replicate variance, their sum, and the matching
cross-subject variance of reconstructed covariate curves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_COLUMNS = ("abias2", "avar", "aimse", "cov_avar")


def _as_curve_stack(curves) -> np.ndarray:
    arr = np.asarray(curves, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected R x n_grid curves, got shape {arr.shape}")
    return arr


def abias2(curves, truth) -> float:
    """Grid-averaged squared bias of the replicate-mean curve."""
    arr = _as_curve_stack(curves)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (arr.shape[1],):
        raise ValueError("truth length does not match the curve grid")
    mean_curve = arr.mean(axis=0)
    return float(np.mean((mean_curve - truth) ** 2))


def avar(curves) -> float:
    """Grid-averaged replicate variance around the replicate-mean curve
    (divisor R, not R-1)."""
    arr = _as_curve_stack(curves)
    mean_curve = arr.mean(axis=0)
    return float(np.mean((arr - mean_curve[None, :]) ** 2))


def aimse(curves, truth) -> float:
    return abias2(curves, truth) + avar(curves)


def covariate_avar(values) -> float:
    """Cross-subject variance of reconstructed curves, grid-averaged.

    Accepts one n x T reconstruction or an R x n x T stack (the stack is
    the mean of the per-dataset values)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        return float(np.mean(np.var(arr, axis=0)))
    if arr.ndim == 3:
        return float(np.mean([covariate_avar(a) for a in arr]))
    raise ValueError(f"expected n x T or R x n x T, got shape {arr.shape}")


@dataclass
class MetricReport:
    """Per-estimator metrics for one scenario, plus the scenario echo."""

    scenario: dict
    estimators: list
    rows: dict                 # estimator -> {abias2, avar, aimse, cov_avar}
    failures: dict = field(default_factory=dict)
    n_completed: dict = field(default_factory=dict)

    def metric(self, estimator: str, name: str) -> float:
        return self.rows[estimator][name]

    @classmethod
    def from_replicates(cls, scenario: dict, truth, curves_by_est: dict,
                        cov_avar_by_est: dict, failures: dict) -> "MetricReport":
        rows = {}
        completed = {}
        for est, curves in curves_by_est.items():
            arr = np.asarray(curves, dtype=float)
            completed[est] = arr.shape[0]
            b2 = abias2(arr, truth)
            av = avar(arr)
            rows[est] = {
                "abias2": b2,
                "avar": av,
                "aimse": b2 + av,  # identity holds bit-exactly
                "cov_avar": float(np.mean(cov_avar_by_est[est])),
            }
        return cls(
            scenario=scenario,
            estimators=list(curves_by_est),
            rows=rows,
            failures=dict(failures),
            n_completed=completed,
        )
