"""Shared domain types: observation grids, covariance kernels, link functions,
and the trapezoidal quadrature used for all functional integrals.

Everything here is immutable after construction and safe to share across
worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Relative jitter allowed when factorizing a covariance matrix.
CHOL_JITTER_REL = 1e-8


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionalGrid:
    """Ordered observation times on [0, 1], shared by all curves."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("grid needs at least 2 points")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if pts[0] < 0.0 or pts[-1] > 1.0:
            raise ValueError("grid points must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, size: int) -> "FunctionalGrid":
        return cls(np.linspace(0.0, 1.0, size))

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> np.ndarray:
        """Per-interval spacing, length size - 1."""
        return np.diff(self.points)

    def quad_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights so that w @ f approximates the
        integral of f over the grid span."""
        d = self.spacing
        w = np.zeros(self.size)
        w[:-1] += d / 2.0
        w[1:] += d / 2.0
        return w


# ---------------------------------------------------------------------------
# Covariance kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceKernel:
    """Covariance model for the latent-curve deviations.

    kind is one of "AR1", "CompoundSymmetry", "Unstructured".  AR1 and CS
    take (sigma, rho); Unstructured takes an explicit matrix.
    """

    kind: str
    sigma: float = 1.0
    rho: float = 0.0
    matrix: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.kind not in ("AR1", "CompoundSymmetry", "Unstructured"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "Unstructured":
            if self.matrix is None:
                raise ValueError("Unstructured kernel requires a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("Unstructured matrix must be square")
            object.__setattr__(self, "matrix", m)
        else:
            if self.sigma <= 0:
                raise ValueError("sigma must be positive")
            if not (0.0 <= self.rho < 1.0):
                raise ValueError("rho must lie in [0, 1)")


def kernel_matrix(kernel: CovarianceKernel, grid: FunctionalGrid) -> np.ndarray:
    """Build the T x T covariance matrix of a kernel on a grid.

    AR1 correlation decays as rho**lag with lag measured in grid-index
    units: lag = |t - t'| * (T - 1), which is the index distance on a
    uniform grid.  Compound symmetry has constant off-diagonal correlation
    rho.  Unstructured copies the stored matrix after a PSD check.
    """
    t = grid.points
    if kernel.kind == "Unstructured":
        m = kernel.matrix
        if m.shape[0] != grid.size:
            raise ValueError(
                f"Unstructured matrix is {m.shape[0]}x{m.shape[1]}, grid has {grid.size} points"
            )
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValueError("Unstructured matrix is not symmetric")
        out = 0.5 * (m + m.T)
        cholesky_with_jitter(out)  # raises if not PSD
        return out

    lag = np.abs(t[:, None] - t[None, :]) * (grid.size - 1)
    s2 = kernel.sigma**2
    if kernel.kind == "AR1":
        if kernel.rho == 0.0:
            return s2 * np.eye(grid.size)
        return s2 * kernel.rho**lag
    # compound symmetry
    out = np.full((grid.size, grid.size), s2 * kernel.rho)
    np.fill_diagonal(out, s2)
    return out


def cholesky_with_jitter(matrix: np.ndarray, rel_jitter: float = CHOL_JITTER_REL) -> np.ndarray:
    """Lower Cholesky factor, adding up to rel_jitter * mean diagonal if the
    plain factorization fails.  Raises ValueError when the matrix is not PSD
    even with jitter."""
    scale = float(np.mean(np.diag(matrix)))
    if scale <= 0:
        scale = 1.0
    for jitter in (0.0, rel_jitter * scale):
        try:
            return np.linalg.cholesky(matrix + jitter * np.eye(matrix.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise ValueError(
        "covariance matrix is not positive semi-definite "
        f"(Cholesky failed with jitter {rel_jitter * scale:.3g})"
    )


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkFunction:
    """Monotone link with its inverse: Logit, Log, or Identity."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("Logit", "Log", "Identity"):
            raise ValueError(f"unknown link kind {self.kind!r}")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "Logit":
            if np.any(x <= 0.0) or np.any(x >= 1.0):
                raise ValueError(f"Logit link needs values in (0, 1), got {x}")
            return np.log(x / (1.0 - x))
        if self.kind == "Log":
            if np.any(x <= 0.0):
                raise ValueError(f"Log link needs positive values, got {x}")
            return np.log(x)
        return x

    def invert(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "Logit":
            return expit(y)
        if self.kind == "Log":
            return np.exp(y)
        return y


def expit(x):
    """Numerically stable inverse logit."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def integrate_product(f: np.ndarray, g: np.ndarray, grid: FunctionalGrid) -> float:
    """Trapezoidal approximation of the integral of f(t) * g(t) on the grid."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (grid.size,) or g.shape != (grid.size,):
        raise ValueError(
            f"vector lengths {f.shape} / {g.shape} do not match grid size {grid.size}"
        )
    return float(grid.quad_weights() @ (f * g))


# ---------------------------------------------------------------------------
# Multi-level sample container
# ---------------------------------------------------------------------------


@dataclass
class MultiLevelSample:
    """Analysis-ready multi-level data: surrogate curves, covariates, outcome.

    W is n x J x T with NaN marking missing observations; Z is n x p; Y is a
    binary n-vector.  X carries the latent truth when known (simulation),
    else None.  weights are optional per-subject observation weights.
    """

    W: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    grid: FunctionalGrid
    X: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    subject_ids: Optional[list] = None
    z_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        self.Y = np.asarray(self.Y)
        if self.W.ndim != 3:
            raise ValueError("W must be n x J x T")
        n, _, T = self.W.shape
        if T != self.grid.size:
            raise ValueError(f"W has {T} time points but grid has {self.grid.size}")
        if self.Z.shape[0] != n or self.Y.shape != (n,):
            raise ValueError("Z / Y first dimension must match W")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def n_replicates(self) -> int:
        return self.W.shape[1]

    def subset(self, idx) -> "MultiLevelSample":
        """Row subset (with repeats allowed), used by the bootstrap."""
        idx = np.asarray(idx)
        return MultiLevelSample(
            W=self.W[idx],
            Z=self.Z[idx],
            Y=self.Y[idx],
            grid=self.grid,
            X=None if self.X is None else self.X[idx],
            eta=None if self.eta is None else self.eta[idx],
            weights=None if self.weights is None else self.weights[idx],
            subject_ids=None
            if self.subject_ids is None
            else [self.subject_ids[i] for i in idx],
            z_names=self.z_names,
            meta=dict(self.meta),
        )
