"""Stage-one reconstruction of latent curves from surrogate count replicates.

Four reconstructions live here: the mixed-model corrections UP_MEM (one
random-intercept fit per time point) and MP_MEM (one window fit per D
adjacent points, sliding one step at a time), and the uncorrected Average
(log of the replicate mean + 1) and Naive (log of the first replicate + 1)
baselines.  The PACE comparator is in the pace module; Oracle is a
passthrough of the true curves.

Reconstruction never touches the outcome or the error-free covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import glmm

METHODS = ("UP_MEM", "MP_MEM", "PACE", "Average", "Naive", "Oracle")


@dataclass
class ReconstructedCovariate:
    """n x T matrix of reconstructed latent values, tagged with the method."""

    method: str
    values: np.ndarray
    window: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("reconstructed values must all be finite")


def _warm_start(fit: Optional[glmm.GlmmFit], n_params: int):
    """Previous fit's outer parameters, unless its variances hit the floor
    (restarting from the floor stalls the simplex)."""
    if fit is None or fit.degenerate:
        return None
    if fit.var_intercept < 1e-6:
        return None
    if n_params == 2:
        return (fit.mu_hat, np.log(fit.var_intercept))
    if fit.var_time is None or fit.var_time < 1e-6:
        return None
    return (fit.mu_hat, np.log(fit.var_intercept), np.log(fit.var_time))


def up_mem(W: np.ndarray, weights=None) -> ReconstructedCovariate:
    """Point-wise mixed-model reconstruction: one random-intercept Poisson
    fit per grid point, prediction mu_hat + r_i."""
    W = np.asarray(W, dtype=float)
    n, J, T = W.shape
    if J < 2:
        raise ValueError("UP_MEM needs at least 2 replicates")
    values = np.empty((n, T))
    flags = {"converged": [], "degenerate": [], "fallback": []}
    prev = None
    for t in range(T):
        sl = W[:, :, t]
        try:
            fit = glmm.fit_pointwise(sl, weights=weights, start=_warm_start(prev, 2))
            values[:, t] = fit.predictions()
            flags["converged"].append(fit.converged)
            flags["degenerate"].append(fit.degenerate)
            flags["fallback"].append(False)
            prev = fit
        except ValueError:
            # unusable time point (e.g. < 2 subjects observed): fall back to
            # the Average transform there and flag it
            with np.errstate(invalid="ignore"):
                col = np.log(np.nan_to_num(np.nanmean(sl, axis=1)) + 1.0)
            values[:, t] = col
            flags["converged"].append(False)
            flags["degenerate"].append(True)
            flags["fallback"].append(True)
    return ReconstructedCovariate("UP_MEM", values, meta={"fits": flags})


def mp_mem(W: np.ndarray, D: int = 3, weights=None) -> ReconstructedCovariate:
    """Sliding-window mixed-model reconstruction.

    Each window of D adjacent points is fitted jointly; the center slot's
    prediction (slot D//2 - 1 + 1 for even D, i.e. index (D-1)//2) is taken
    as the reconstruction at the window's center time.  The first and last
    floor(D/2) grid points fall outside any window center and take their
    values from the first / last window's outer slots.
    """
    if D == 1:
        raise ValueError("D = 1 is the point-wise model; use up_mem")
    W = np.asarray(W, dtype=float)
    if not (2 <= D <= W.shape[2]):
        raise ValueError(f"need 2 <= D <= T, got D={D}, T={W.shape[2]}")
    return _sliding_window_reconstruct(W, D, weights, tag="MP_MEM")


def _sliding_window_reconstruct(W, D, weights, tag):
    n, J, T = W.shape
    center = (D - 1) // 2
    n_windows = T - D + 1
    values = np.empty((n, T))
    flags = {"converged": [], "degenerate": []}
    prev = None
    for s in range(n_windows):
        if D == 1:
            fit = glmm.fit_pointwise(W[:, :, s], weights=weights, start=_warm_start(prev, 2))
            preds = fit.predictions()[:, None]
        else:
            fit = glmm.fit_window(W[:, :, s : s + D], weights=weights, start=_warm_start(prev, 3))
            preds = fit.predictions()
        prev = fit
        flags["converged"].append(fit.converged)
        flags["degenerate"].append(fit.degenerate)
        if s == 0:
            values[:, :center] = preds[:, :center]
        values[:, s + center] = preds[:, center]
        if s == n_windows - 1:
            values[:, s + center + 1 :] = preds[:, center + 1 :]
    return ReconstructedCovariate(tag, values, window=D, meta={"fits": flags})


def average_reconstruct(W: np.ndarray) -> ReconstructedCovariate:
    """log(replicate mean + 1); entries with no observed replicate become
    log(1) = 0 and are counted in meta."""
    W = np.asarray(W, dtype=float)
    n_obs = np.isfinite(W).sum(axis=1)
    mean = np.nansum(W, axis=1) / np.maximum(n_obs, 1)
    values = np.log(np.where(n_obs > 0, mean, 0.0) + 1.0)
    return ReconstructedCovariate(
        "Average", values, meta={"n_unobserved": int((n_obs == 0).sum())}
    )


def naive_reconstruct(W: np.ndarray) -> ReconstructedCovariate:
    """log(first replicate + 1); missing first-replicate entries count as 0."""
    W = np.asarray(W, dtype=float)
    first = W[:, 0, :]
    missing = ~np.isfinite(first)
    values = np.log(np.where(missing, 0.0, first) + 1.0)
    return ReconstructedCovariate("Naive", values, meta={"n_missing": int(missing.sum())})


def oracle_reconstruct(X: np.ndarray) -> ReconstructedCovariate:
    """Benchmark passthrough of the true latent curves."""
    return ReconstructedCovariate("Oracle", np.array(X, dtype=float, copy=True))
