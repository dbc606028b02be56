"""Stage-two scalar-on-function logistic regression.

The functional coefficient is expanded in a B-spline basis, the functional
covariate is reduced to basis-weighted integrals, and the resulting finite
logistic model (intercept + spline coefficients + error-free covariates) is
fitted by iteratively reweighted least squares, i.e. Newton-Raphson on the
Bernoulli log-likelihood with step halving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

from .core import FunctionalGrid, expit
from .mem import ReconstructedCovariate

SCORE_TOL = 1e-8
DEVIANCE_RTOL = 1e-10
MAX_IRLS_ITER = 100
SEPARATION_COEF = 30.0


@dataclass
class SplineBasis:
    """B-spline basis on [0, 1] evaluated on a grid: open-uniform knots,
    K_n functions of the given degree."""

    degree: int
    n_basis: int
    knots: np.ndarray       # full knot vector
    evaluation: np.ndarray  # T x K_n
    grid: FunctionalGrid


def build_basis(grid: FunctionalGrid, n_basis: int = 15, degree: int = 3) -> SplineBasis:
    """Open-uniform B-spline basis with n_basis functions (n_basis >= degree+1)."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if n_basis < degree + 1:
        raise ValueError(f"need n_basis >= degree + 1 = {degree + 1}, got {n_basis}")
    interior = np.linspace(0.0, 1.0, n_basis - degree + 1)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    design = BSpline.design_matrix(grid.points, knots, degree).toarray()
    return SplineBasis(degree=degree, n_basis=n_basis, knots=knots, evaluation=design, grid=grid)


def functional_design(Xhat: np.ndarray, basis: SplineBasis) -> np.ndarray:
    """n x K_n matrix of basis-weighted integrals of each curve."""
    Xhat = np.asarray(Xhat, dtype=float)
    if Xhat.ndim != 2 or Xhat.shape[1] != basis.grid.size:
        raise ValueError(
            f"curves have {Xhat.shape[-1]} points, basis grid has {basis.grid.size}"
        )
    w = basis.grid.quad_weights()
    return Xhat @ (w[:, None] * basis.evaluation)


@dataclass
class SofrFit:
    """Fitted outcome model: spline coefficients, scalar coefficients
    (intercept first), the coefficient curve on the grid, and the inverse
    observed information at the optimum."""

    omega: np.ndarray       # (K_n,)
    alpha: np.ndarray       # (1 + p,), intercept first
    beta_curve: np.ndarray  # (T,)
    vcov: np.ndarray        # full coefficient covariance, IRLS ordering
    converged: bool
    separated: bool
    iterations: int
    deviance: float
    method: Optional[str] = None
    basis: Optional[SplineBasis] = None
    z_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    @property
    def coef(self) -> np.ndarray:
        """All coefficients in design order: intercept, omega, alpha tail."""
        return np.concatenate([self.alpha[:1], self.omega, self.alpha[1:]])


def _bernoulli_deviance(y, eta, w):
    # -2 * loglik, stable for large |eta|
    return float(2.0 * np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


def fit_logistic(design: np.ndarray, Z: np.ndarray, Y: np.ndarray, weights=None,
                 basis: Optional[SplineBasis] = None) -> SofrFit:
    """IRLS fit of the logistic outcome model.

    Columns are [intercept | functional design | Z].  Convergence when the
    score's max absolute entry falls below 1e-8 or the relative deviance
    change below 1e-10; steps are halved whenever the deviance would rise.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0:
        Z = np.zeros((design.shape[0], 0))
    if Z.ndim == 1:
        Z = Z[:, None]
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if design.shape[0] != n or Z.shape[0] != n:
        raise ValueError("design / Z / Y row counts differ")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("Y must be binary")
    K = design.shape[1]
    X = np.column_stack([np.ones(n), design, Z])
    p_all = X.shape[1]
    if n <= p_all:
        raise ValueError(f"need n > {p_all} parameters, got n = {n}")
    w_obs = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w_obs <= 0):
        raise ValueError("weights must be positive")

    # rank check up front so a null direction is reported, not a crash
    svals = np.linalg.svd(X, compute_uv=False)
    if svals[-1] < 1e-10 * svals[0]:
        _, _, vt = np.linalg.svd(X)
        null = vt[-1]
        worst = np.argsort(np.abs(null))[::-1][:3]
        raise ValueError(
            "design matrix is rank deficient; null direction loads on "
            f"columns {worst.tolist()} (0=intercept, 1..{K}=basis, rest=Z)"
        )

    beta = np.zeros(p_all)
    eta = X @ beta
    dev = _bernoulli_deviance(Y, eta, w_obs)
    converged = False
    separated = False
    it = 0
    for it in range(1, MAX_IRLS_ITER + 1):
        p = expit(eta)
        score = X.T @ (w_obs * (Y - p))
        if np.max(np.abs(score)) <= SCORE_TOL:
            converged = True
            break
        irls_w = w_obs * p * (1.0 - p)
        info = X.T @ (irls_w[:, None] * X)
        step = np.linalg.solve(info + 1e-12 * np.eye(p_all), score)
        new_dev = dev
        for _ in range(30):
            cand = beta + step
            cand_eta = X @ cand
            new_dev = _bernoulli_deviance(Y, cand_eta, w_obs)
            if new_dev <= dev + 1e-12:
                break
            step = step / 2.0
        beta, eta = beta + step, X @ (beta + step)
        # separation: coefficients diverging AND fitted probabilities pinned
        # at 0/1 (large coefficients alone also arise from benign
        # ill-conditioning, e.g. low-variance functional designs)
        if (
            np.max(np.abs(beta)) > SEPARATION_COEF
            and np.max(np.abs(eta)) > SEPARATION_COEF
            and np.max(np.abs(score)) > 1e-6
        ):
            separated = True
            break
        rel = abs(dev - new_dev) / (abs(dev) + 1e-300)
        dev = new_dev
        if rel <= DEVIANCE_RTOL:
            converged = np.max(np.abs(X.T @ (w_obs * (Y - expit(eta))))) <= 1e-4
            break

    p = expit(eta)
    irls_w = w_obs * p * (1.0 - p)
    info = X.T @ (irls_w[:, None] * X)
    vcov = np.linalg.inv(info + 1e-12 * np.eye(p_all))
    vcov = 0.5 * (vcov + vcov.T)
    omega = beta[1 : 1 + K]
    alpha = np.concatenate([beta[:1], beta[1 + K :]])
    curve = basis.evaluation @ omega if basis is not None else np.array([])
    return SofrFit(
        omega=omega,
        alpha=alpha,
        beta_curve=curve,
        vcov=vcov,
        converged=converged and not separated,
        separated=separated,
        iterations=it,
        deviance=dev,
        basis=basis,
    )


def estimate(
    reconstruction: ReconstructedCovariate,
    Z: np.ndarray,
    Y: np.ndarray,
    K_n: int = 15,
    degree: int = 3,
    weights=None,
    z_names=None,
    grid: Optional[FunctionalGrid] = None,
) -> SofrFit:
    """Full stage two: basis, functional design, logistic fit; the fit is
    tagged with the reconstruction method."""
    if grid is None:
        grid = FunctionalGrid.uniform(reconstruction.values.shape[1])
    basis = build_basis(grid, n_basis=K_n, degree=degree)
    design = functional_design(reconstruction.values, basis)
    fit = fit_logistic(design, Z, Y, weights=weights, basis=basis)
    fit.method = reconstruction.method
    fit.z_names = list(z_names) if z_names is not None else None
    fit.meta["window"] = reconstruction.window
    return fit
