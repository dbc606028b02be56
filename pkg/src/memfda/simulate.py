"""Synthetic data generation: latent Gaussian-process activity curves,
Poisson-count surrogate replicates, error-free covariates, and binary
outcomes from a functional logistic model.

The generating model is
    X_i(t) = 1 / (1 + exp(8 (t - 0.5))) + e_i(t),   e_i ~ GP(0, AR1 kernel)
    W_ij(t) | X_i(t) ~ Poisson(exp(X_i(t))),        j = 1..J
    Y_i ~ Bernoulli(expit(int beta(t) X_i(t) dt + Z_i' alpha))
with beta(t) = sin(2 pi t) and alpha = (1, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (
    CovarianceKernel,
    FunctionalGrid,
    MultiLevelSample,
    cholesky_with_jitter,
    expit,
    integrate_product,
    kernel_matrix,
)

ALPHA_TRUE = np.array([1.0, 2.0])

# Poisson means above exp(X_MAX) overflow doubles; generation refuses them.
X_MAX = 700.0


def mean_curve(t: np.ndarray) -> np.ndarray:
    """Population mean of the latent process: a falling logistic curve."""
    return 1.0 / (1.0 + np.exp(8.0 * (np.asarray(t, dtype=float) - 0.5)))


def beta_curve(t: np.ndarray) -> np.ndarray:
    """True functional coefficient sin(2 pi t)."""
    return np.sin(2.0 * np.pi * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: sizes, kernel parameters, window, seeds."""

    n: int = 500
    T: int = 50
    J: int = 5
    sigma_x: float = 2.0
    rho_x: float = 0.5
    D: int = 3
    seed: int = 0
    R: int = 100
    K_n: int = 15

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not (self.T >= self.D >= 1):
            raise ValueError("need T >= D >= 1")
        if self.J < 2:
            raise ValueError("J must be at least 2 (replicates identify the model)")
        if self.R < 1:
            raise ValueError("R must be at least 1")

    def grid(self) -> FunctionalGrid:
        return FunctionalGrid.uniform(self.T)

    def kernel(self) -> CovarianceKernel:
        return CovarianceKernel("AR1", sigma=self.sigma_x, rho=self.rho_x)

    def with_updates(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


@dataclass
class SimulatedDataset:
    """One generated dataset plus the truth that produced it."""

    X: np.ndarray          # n x T latent curves
    W: np.ndarray          # n x J x T surrogate counts
    Z: np.ndarray          # n x 2 error-free covariates
    Y: np.ndarray          # n binary outcomes
    eta: np.ndarray        # n linear predictors
    beta_true: np.ndarray  # beta(t) on the grid
    alpha_true: np.ndarray
    grid: FunctionalGrid
    config: ScenarioConfig
    replicate: int = 0

    def as_sample(self) -> MultiLevelSample:
        return MultiLevelSample(
            W=self.W,
            Z=self.Z,
            Y=self.Y,
            grid=self.grid,
            X=self.X,
            eta=self.eta,
            z_names=["Z1", "Z2"],
            meta={"seed": self.config.seed, "replicate": self.replicate},
        )


def _rng_streams(seed: int, replicate: int, count: int):
    """Independent child generators for one (seed, replicate) dataset."""
    root = np.random.SeedSequence([int(seed), int(replicate)])
    return [np.random.default_rng(ss) for ss in root.spawn(count)]


def sample_latent_curves(
    config: ScenarioConfig, grid: FunctionalGrid, rng: np.random.Generator
) -> np.ndarray:
    """Draw n latent curves mu(t) + L z with L the Cholesky factor of the
    AR(1) kernel matrix.  sigma_x = 0 degenerates to the mean curve."""
    mu = mean_curve(grid.points)
    if config.sigma_x == 0.0:
        return np.tile(mu, (config.n, 1))
    sigma = kernel_matrix(config.kernel(), grid)
    L = cholesky_with_jitter(sigma)
    z = rng.standard_normal((config.n, grid.size))
    return mu[None, :] + z @ L.T


def sample_surrogates(X: np.ndarray, J: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson surrogate counts with intensity exp(X_i(t)), J independent
    replicates per subject."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("latent curves contain non-finite values")
    if np.any(X > X_MAX):
        raise ValueError(
            f"latent values exceed {X_MAX}; exp overflows. Rescale sigma_x or the mean."
        )
    lam = np.exp(X)
    return rng.poisson(lam[:, None, :], size=(X.shape[0], J, X.shape[1])).astype(float)


def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Error-free covariates: Z1 ~ N(2, 1) continuous, Z2 ~ Bernoulli(0.6)."""
    z1 = rng.normal(2.0, 1.0, size=n)
    z2 = rng.binomial(1, 0.6, size=n).astype(float)
    return np.column_stack([z1, z2])


def linear_predictor(X: np.ndarray, Z: np.ndarray, grid: FunctionalGrid) -> np.ndarray:
    beta = beta_curve(grid.points)
    w = grid.quad_weights()
    return (X * beta[None, :]) @ w + Z @ ALPHA_TRUE


def sample_outcomes(
    X: np.ndarray, Z: np.ndarray, grid: FunctionalGrid, rng: np.random.Generator
):
    """Binary outcomes from the functional logistic model; returns (Y, eta)."""
    eta = linear_predictor(X, Z, grid)
    Y = rng.binomial(1, expit(eta))
    return Y, eta


def make_dataset(config: ScenarioConfig, replicate: int = 0) -> SimulatedDataset:
    """Generate one dataset deterministically from (config.seed, replicate).

    Separate RNG substreams drive curves, counts, and outcomes, so changing
    J (say) does not perturb the latent curves.
    """
    grid = config.grid()
    rng_x, rng_w, rng_z, rng_y = _rng_streams(config.seed, replicate, 4)
    X = sample_latent_curves(config, grid, rng_x)
    W = sample_surrogates(X, config.J, rng_w)
    Z = sample_covariates(config.n, rng_z)
    Y, eta = sample_outcomes(X, Z, grid, rng_y)
    return SimulatedDataset(
        X=X,
        W=W,
        Z=Z,
        Y=Y,
        eta=eta,
        beta_true=beta_curve(grid.points),
        alpha_true=ALPHA_TRUE.copy(),
        grid=grid,
        config=config,
        replicate=replicate,
    )
