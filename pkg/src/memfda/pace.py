"""Functional principal components analysis with scores obtained by
conditional expectation, used as a comparator reconstruction.

The pipeline is the classical one for dense-but-noisy curves: local-linear
smoothing of the cross-sectional mean, local-linear surface smoothing of the
raw covariance with the diagonal left out, noise variance from the
raw-minus-smoothed diagonal gap, an eigendecomposition under trapezoid
quadrature weights, and best-linear-predictor scores for each curve.

Input curves for the reconstruction are per-subject replicate means of
log(count + 1): the additive-noise model FPCA assumes is plausible on that
scale, and averaging replicates parallels the Average baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FunctionalGrid
from .mem import ReconstructedCovariate

BANDWIDTH_GRID = (0.05, 0.1, 0.2)  # fractions of the grid span
SCORE_RIDGE_REL = 1e-8


@dataclass
class FpcaModel:
    """Fitted eigensystem: mean curve, K leading eigenfunctions (orthonormal
    under the grid quadrature weights), eigenvalues, and noise variance."""

    mean_curve: np.ndarray      # (T,)
    eigenfunctions: np.ndarray  # (T, K)
    eigenvalues: np.ndarray     # (K,), non-increasing
    noise_var: float
    fve_target: float
    fve: float
    grid: FunctionalGrid
    bandwidth_mean: float = np.nan
    bandwidth_cov: float = np.nan

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size


def _epanechnikov(u):
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u**2), 0.0)


def _solve_ridged(M, rhs):
    """Batched solve with a tiny ridge so empty-neighborhood systems do not
    blow up; near-singular fits produce wild values that GCV then rejects."""
    eye = np.eye(M.shape[-1])
    scale = np.maximum(np.abs(M[..., 0, 0]), 1e-300)
    ridge = (1e-12 * scale)[..., None, None] * eye
    return np.linalg.solve(M + ridge, rhs[..., None])[..., 0]


def _smooth_mean_1d(t, y, h):
    """Local-linear fit of y on t, evaluated at every t; also returns the
    smoother's self-weights for GCV."""
    d = t[None, :] - t[:, None]            # (eval, obs)
    k = _epanechnikov(d / h)
    M = np.empty((t.size, 2, 2))
    M[:, 0, 0] = k.sum(axis=1)
    M[:, 0, 1] = M[:, 1, 0] = (k * d).sum(axis=1)
    M[:, 1, 1] = (k * d * d).sum(axis=1)
    rhs = np.stack([(k * y).sum(axis=1), (k * d * y).sum(axis=1)], axis=-1)
    beta = _solve_ridged(M, rhs)
    Minv00 = np.linalg.inv(M + 1e-12 * np.eye(2))[:, 0, 0]
    self_w = _epanechnikov(np.zeros(1))[0] * Minv00
    return beta[:, 0], self_w


def _gcv_pick_mean(t, y, span):
    best = (np.inf, None, None)
    for frac in BANDWIDTH_GRID:
        h = frac * span
        fitted, self_w = _smooth_mean_1d(t, y, h)
        tr = float(self_w.sum())
        denom = 1.0 - tr / t.size
        if denom <= 1e-8 or not np.all(np.isfinite(fitted)):
            continue
        gcv = float(np.sum((y - fitted) ** 2)) / denom**2
        if gcv < best[0]:
            best = (gcv, fitted, h)
    if best[1] is None:  # every bandwidth degenerate; widest window wins
        fitted, _ = _smooth_mean_1d(t, y, BANDWIDTH_GRID[-1] * span * 10)
        return fitted, BANDWIDTH_GRID[-1] * span * 10
    return best[1], best[2]


def _surface_moments(t, h, V, G):
    """Moment matrices of the 2-d local-linear smoother on the grid product,
    with V masking usable raw-covariance cells.  Returns fitted surface and
    the self-weight array for GCV."""
    d = t[None, :] - t[:, None]            # (eval, obs)
    k = _epanechnikov(d / h)
    k0, k1, k2 = k, k * d, k * d * d

    def cross(A, B, mid):
        return A @ mid @ B.T

    M = np.empty((t.size, t.size, 3, 3))
    M[..., 0, 0] = cross(k0, k0, V)
    M[..., 0, 1] = M[..., 1, 0] = cross(k1, k0, V)
    M[..., 0, 2] = M[..., 2, 0] = cross(k0, k1, V)
    M[..., 1, 1] = cross(k2, k0, V)
    M[..., 1, 2] = M[..., 2, 1] = cross(k1, k1, V)
    M[..., 2, 2] = cross(k0, k2, V)
    VG = V * G
    rhs = np.stack(
        [cross(k0, k0, VG), cross(k1, k0, VG), cross(k0, k1, VG)], axis=-1
    )
    beta = _solve_ridged(M, rhs)
    Minv00 = np.linalg.inv(M + 1e-12 * np.eye(3))[..., 0, 0]
    self_w = _epanechnikov(np.zeros(1))[0] ** 2 * Minv00
    return beta[..., 0], self_w


def _gcv_pick_surface(t, span, V, G):
    n_cells = float(V.sum())
    best = (np.inf, None, None)
    for frac in BANDWIDTH_GRID:
        h = frac * span
        fitted, self_w = _surface_moments(t, h, V, G)
        if not np.all(np.isfinite(fitted)):
            continue
        tr = float((self_w * V).sum())
        denom = 1.0 - tr / n_cells
        if denom <= 1e-8:
            continue
        gcv = float(np.sum(V * (G - fitted) ** 2)) / denom**2
        if gcv < best[0]:
            best = (gcv, fitted, h)
    if best[1] is None:
        fitted, _ = _surface_moments(t, BANDWIDTH_GRID[-1] * span * 10, V, G)
        return fitted, BANDWIDTH_GRID[-1] * span * 10
    return best[1], best[2]


def fit_fpca(curves: np.ndarray, grid: FunctionalGrid, fve_target: float = 0.99) -> FpcaModel:
    """Fit the FPCA model to n x T curves (NaN allowed for missing values).

    The number of components K is the smallest one whose cumulative
    fraction of variance explained reaches fve_target (at least 1).
    """
    curves = np.asarray(curves, dtype=float)
    if curves.ndim != 2 or curves.shape[1] != grid.size:
        raise ValueError("curves must be n x T on the given grid")
    if curves.shape[0] < 5:
        raise ValueError("FPCA needs at least 5 curves")
    if not (0.0 < fve_target <= 1.0):
        raise ValueError("fve_target must be in (0, 1]")
    obs = np.isfinite(curves)
    col_counts = obs.sum(axis=0)
    if np.any(col_counts == 0):
        raise ValueError(
            f"no observations at grid point(s) {np.where(col_counts == 0)[0].tolist()}"
        )

    t = grid.points
    span = float(t[-1] - t[0])

    raw_mean = np.nansum(np.where(obs, curves, 0.0), axis=0) / col_counts
    mu, bw_mu = _gcv_pick_mean(t, raw_mean, span)

    centered = np.where(obs, curves - mu[None, :], 0.0)
    pair_counts = obs.T.astype(float) @ obs.astype(float)
    raw_cov = (centered.T @ centered) / np.maximum(pair_counts - 1.0, 1.0)

    V = (pair_counts > 1).astype(float)
    np.fill_diagonal(V, 0.0)
    smooth_cov, bw_cov = _gcv_pick_surface(t, span, V, raw_cov)
    smooth_cov = 0.5 * (smooth_cov + smooth_cov.T)

    diag_gap = np.diag(raw_cov) - np.diag(smooth_cov)
    valid_diag = np.diag(pair_counts) > 1
    noise_var = float(max(np.mean(diag_gap[valid_diag]), 0.0)) if np.any(valid_diag) else 0.0

    w = grid.quad_weights()
    sw = np.sqrt(w)
    sym = sw[:, None] * smooth_cov * sw[None, :]
    evals, evecs = np.linalg.eigh(0.5 * (sym + sym.T))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pos = evals > max(evals[0], 0.0) * 1e-12
    pos[0] = True  # keep at least one component even in degenerate data
    evals = np.maximum(evals[pos], 0.0)
    phi = evecs[:, pos] / sw[:, None]
    # deterministic sign: positive leading coordinate
    for k in range(phi.shape[1]):
        lead = phi[0, k]
        if abs(lead) <= 1e-12:
            nz = np.nonzero(np.abs(phi[:, k]) > 1e-12)[0]
            lead = phi[nz[0], k] if nz.size else 1.0
        if lead < 0:
            phi[:, k] = -phi[:, k]

    total = float(evals.sum())
    if total <= 0.0:
        K = 1
        fve = 1.0
    else:
        cum = np.cumsum(evals) / total
        K = int(np.searchsorted(cum, fve_target) + 1)
        K = min(max(K, 1), evals.size)
        fve = float(cum[K - 1])
    return FpcaModel(
        mean_curve=mu,
        eigenfunctions=phi[:, :K],
        eigenvalues=evals[:K],
        noise_var=noise_var,
        fve_target=fve_target,
        fve=fve,
        grid=grid,
        bandwidth_mean=bw_mu,
        bandwidth_cov=bw_cov,
    )


def _score_block(model: FpcaModel, resid: np.ndarray, obs_idx: np.ndarray):
    """Conditional-expectation scores for curves sharing one missingness
    pattern; resid is (m, T_obs) of centered observed values."""
    phi = model.eigenfunctions[obs_idx]          # (T_obs, K)
    lam = model.eigenvalues
    sigma_w = (phi * lam[None, :]) @ phi.T
    sigma_w[np.diag_indices_from(sigma_w)] += model.noise_var
    ridged = False
    try:
        np.linalg.cholesky(sigma_w)
    except np.linalg.LinAlgError:
        ridged = True
    if ridged or model.noise_var == 0.0:
        jitter = SCORE_RIDGE_REL * np.trace(sigma_w) / sigma_w.shape[0]
        sigma_w = sigma_w + jitter * np.eye(sigma_w.shape[0])
        ridged = True
    sol = np.linalg.solve(sigma_w, resid.T)      # (T_obs, m)
    return (lam[:, None] * (phi.T @ sol)).T, ridged


def pace_scores(model: FpcaModel, curve: np.ndarray):
    """Best-linear-predictor scores of one curve (NaN entries are skipped)."""
    curve = np.asarray(curve, dtype=float)
    if curve.shape != (model.grid.size,):
        raise ValueError("curve length does not match the model grid")
    obs_idx = np.where(np.isfinite(curve))[0]
    if obs_idx.size == 0:
        raise ValueError("curve has no observed values")
    resid = (curve[obs_idx] - model.mean_curve[obs_idx])[None, :]
    scores, _ = _score_block(model, resid, obs_idx)
    return scores[0]


def pace_reconstruct(
    W: np.ndarray, grid: FunctionalGrid, fve_target: float = 0.99
) -> ReconstructedCovariate:
    """PACE reconstruction of the latent curves from count replicates.

    Each subject's input curve is the replicate mean of log(count + 1);
    the reconstruction is mean + eigenfunctions @ scores.
    """
    W = np.asarray(W, dtype=float)
    n, J, T = W.shape
    obs_counts = np.isfinite(W).sum(axis=1)
    with np.errstate(invalid="ignore"):
        curves = np.where(
            obs_counts > 0,
            np.nansum(np.log(W + 1.0), axis=1) / np.maximum(obs_counts, 1),
            np.nan,
        )
    model = fit_fpca(curves, grid, fve_target=fve_target)

    values = np.tile(model.mean_curve, (n, 1))
    patterns, inverse = np.unique(np.isfinite(curves), axis=0, return_inverse=True)
    any_ridged = False
    for p in range(patterns.shape[0]):
        rows = np.where(inverse == p)[0]
        obs_idx = np.where(patterns[p])[0]
        if obs_idx.size == 0:
            continue  # fully missing subject: stays at the mean curve
        resid = curves[np.ix_(rows, obs_idx)] - model.mean_curve[obs_idx][None, :]
        scores, ridged = _score_block(model, resid, obs_idx)
        any_ridged = any_ridged or ridged
        values[rows] += scores @ model.eigenfunctions.T
    return ReconstructedCovariate(
        "PACE",
        values,
        meta={
            "n_components": model.n_components,
            "noise_var": model.noise_var,
            "fve": model.fve,
            "bandwidth_mean": model.bandwidth_mean,
            "bandwidth_cov": model.bandwidth_cov,
            "ridged": any_ridged,
        },
    )
