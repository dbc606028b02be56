"""Small Poisson log-link mixed models fitted by marginal maximum likelihood.

Two designs are supported, both with subject-level random effects:

* point-wise: log-mean = mu + r_i, r_i ~ N(0, tau^2).  Fitted by a Laplace
  approximation and refined with adaptive Gauss-Hermite quadrature.
* window: log-mean = mu + r0_i + rd_i * 1{slot = d}, d = 1..D-1, with the
  first slot as reference level, r0_i ~ N(0, tau0^2), rd_i ~ N(0, tau1^2)
  shared across slots.  Fitted by Laplace with a per-subject D-dimensional
  Newton solve; the precision matrix is an arrow matrix, solved in closed
  form.

The point-wise Poisson likelihood depends on each subject only through the
sufficient statistics (sum of counts, number of observations), so subjects
are grouped before the inner solves.  Missing observations (NaN) are dropped
from the likelihood; subjects with no data at all contribute nothing and are
predicted at the fixed intercept.

Weights are per-subject pseudo-likelihood weights, normalized internally to
mean one so that rescaling them is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from . import _kernels

VAR_FLOOR = 1e-10
MU_FLOOR = 1e-8          # floored Poisson mean when every count is zero
MAX_OUTER_ITER = 200
INNER_TOL = 1e-12
MAX_INNER_ITER = 100
_LOG_VAR_BOUNDS = (np.log(VAR_FLOOR), np.log(1e6))
_MU_BOUNDS = (-30.0, 30.0)


@dataclass
class GlmmFit:
    """Fitted mixed model: fixed intercept, variance components, and
    per-subject predicted random effects (posterior modes)."""

    mu_hat: float
    var_intercept: float
    var_time: Optional[float]        # shared slot-deviation variance, window fits only
    rand_intercept: np.ndarray       # (n,)
    rand_time: Optional[np.ndarray]  # (n, D-1), window fits only
    window: int                      # D; 1 for point-wise fits
    converged: bool
    degenerate: bool
    loglik: float
    family: str = "poisson"
    sigma2: Optional[float] = None   # residual variance, gaussian family only
    no_data: Optional[np.ndarray] = None  # (n,) bool, subjects without observations

    @property
    def n_subjects(self) -> int:
        return self.rand_intercept.shape[0]

    def predictions(self) -> np.ndarray:
        """Link-scale conditional means for every subject and slot:
        (n,) for point-wise fits, (n, D) for window fits."""
        base = self.mu_hat + self.rand_intercept
        if self.window == 1:
            return base
        dev = np.concatenate(
            [np.zeros((self.n_subjects, 1)), self.rand_time], axis=1
        )
        return base[:, None] + dev


def predict_x(fit: GlmmFit, subject: int, slot: int = 0) -> float:
    """Reconstructed latent value mu_hat + r0_i (+ slot deviation for
    slot >= 1 in window fits).  Slots are 0-indexed; slot 0 is the
    reference level."""
    if not (0 <= subject < fit.n_subjects):
        raise ValueError(f"unknown subject {subject} (fit has {fit.n_subjects})")
    if not (0 <= slot < fit.window):
        raise ValueError(f"slot {slot} outside window of size {fit.window}")
    value = fit.mu_hat + fit.rand_intercept[subject]
    if slot >= 1:
        value += fit.rand_time[subject, slot - 1]
    return float(value)


# ---------------------------------------------------------------------------
# Shared validation helpers
# ---------------------------------------------------------------------------


def _check_counts(counts: np.ndarray, ndim: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != ndim:
        raise ValueError(f"counts must be a {ndim}-d array, got shape {counts.shape}")
    obs = counts[np.isfinite(counts)]
    if obs.size and (np.any(obs < 0) or np.any(obs != np.round(obs))):
        raise ValueError("counts must be nonnegative integers (NaN for missing)")
    return counts


def _check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights must have shape ({n},)")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w / w.mean()


@lru_cache(maxsize=8)
def _gh_nodes(n_quad: int):
    x, w = np.polynomial.hermite.hermgauss(n_quad)
    return x, np.log(w) + x**2


def _nm_minimize(fun, x0, bounds, warm: bool):
    """Nelder-Mead with the objective tolerance scaled to the objective's
    magnitude (1e-8 relative) and a small initial simplex when warm-started."""
    f0 = fun(np.asarray(x0, dtype=float))
    opts = {
        "maxiter": MAX_OUTER_ITER * len(x0),
        "xatol": 1e-5,
        "fatol": max(1e-9, 1e-8 * abs(f0)),
    }
    if warm:
        sim = np.tile(np.asarray(x0, dtype=float), (len(x0) + 1, 1))
        for k in range(len(x0)):
            sim[k + 1, k] += 0.03
        opts["initial_simplex"] = sim
    res = minimize(fun, x0, method="Nelder-Mead", bounds=bounds, options=opts)
    return res


# ---------------------------------------------------------------------------
# Point-wise model
# ---------------------------------------------------------------------------


def _pointwise_stats(counts: np.ndarray, weights: np.ndarray):
    """Group subjects by (count sum, replicate count); returns group stats,
    accumulated group weights, and the subject -> group map."""
    S = np.nansum(counts, axis=1)
    J = np.sum(np.isfinite(counts), axis=1).astype(float)
    active = J > 0
    keys = np.column_stack([S, J])
    uniq, inverse = np.unique(keys[active], axis=0, return_inverse=True)
    gw = np.zeros(uniq.shape[0])
    np.add.at(gw, inverse, weights[active])
    return uniq[:, 0], uniq[:, 1], gw, inverse, active


def _pointwise_modes(S, J, mu, tau2, r0=None):
    """Per-group posterior modes of the random intercept (1-d Newton)."""
    r = np.zeros_like(S) if r0 is None else r0.copy()
    for _ in range(MAX_INNER_ITER):
        lam = J * np.exp(np.clip(mu + r, -745.0, 700.0))
        g = S - lam - r / tau2
        if np.max(np.abs(g) / (1.0 + S)) < INNER_TOL:
            break
        step = g / (lam + 1.0 / tau2)
        r += np.clip(step, -5.0, 5.0)
    return r


def _pointwise_loglik_terms(S, J, mu, tau2, method, n_quad, r0=None):
    """Per-group marginal log-likelihood (without the count factorials)."""
    if _kernels.HAVE_NUMBA:
        r_hat = np.zeros_like(S) if r0 is None else r0.copy()
        if method == "laplace":
            ll = _kernels.pointwise_loglik_laplace(S, J, mu, tau2, r_hat)
        else:
            x, logw = _gh_nodes(n_quad)
            ll = _kernels.pointwise_loglik_agq(S, J, mu, tau2, r_hat, x, logw)
        return ll, r_hat
    r_hat = _pointwise_modes(S, J, mu, tau2, r0)
    lam_hat = J * np.exp(np.clip(mu + r_hat, -745.0, 700.0))
    A = lam_hat + 1.0 / tau2
    if method == "laplace":
        f_hat = S * (mu + r_hat) - lam_hat - r_hat**2 / (2.0 * tau2)
        ll = f_hat - 0.5 * np.log(tau2) - 0.5 * np.log(A)
        return ll, r_hat
    # adaptive Gauss-Hermite
    x, logw = _gh_nodes(n_quad)
    shat = 1.0 / np.sqrt(A)
    nodes = r_hat[:, None] + np.sqrt(2.0) * shat[:, None] * x[None, :]
    q = (
        S[:, None] * (mu + nodes)
        - J[:, None] * np.exp(np.clip(mu + nodes, -745.0, 700.0))
        - nodes**2 / (2.0 * tau2)
        + logw[None, :]
    )
    qmax = q.max(axis=1)
    ll = (
        0.5 * np.log(2.0)
        + np.log(shat)
        - 0.5 * np.log(2.0 * np.pi * tau2)
        + qmax
        + np.log(np.exp(q - qmax[:, None]).sum(axis=1))
    )
    return ll, r_hat


def pointwise_marginal_loglik(
    mu: float,
    tau2: float,
    counts: np.ndarray,
    weights=None,
    method: str = "agq",
    n_quad: int = 7,
) -> float:
    """Marginal log-likelihood of the point-wise Poisson model at (mu, tau2).

    Exposed so callers can probe the objective the fitter maximizes."""
    counts = _check_counts(counts, 2)
    weights = _check_weights(weights, counts.shape[0])
    S, J, gw, _, active = _pointwise_stats(counts, weights)
    ll, _ = _pointwise_loglik_terms(S, J, mu, max(tau2, VAR_FLOOR), method, n_quad)
    const = float(np.sum(weights[active] * np.nansum(gammaln(counts[active] + 1.0), axis=1)))
    return float(gw @ ll) - const


def fit_pointwise(
    counts: np.ndarray,
    weights=None,
    family: str = "poisson",
    n_quad: int = 7,
    start=None,
) -> GlmmFit:
    """Fit the random-intercept model to an n x J count matrix.

    Maximizes the Laplace objective over (mu, log tau2) with Nelder-Mead,
    then refines on the adaptive Gauss-Hermite objective when the variance
    is off its floor.  `start` optionally warm-starts the outer search with
    a previous fit's (mu, log tau2).
    """
    if family == "gaussian":
        return _fit_pointwise_gaussian(counts, weights, start)
    if family != "poisson":
        raise ValueError(f"unknown family {family!r}")
    counts = _check_counts(counts, 2)
    n = counts.shape[0]
    weights = _check_weights(weights, n)
    S, J, gw, inverse, active = _pointwise_stats(counts, weights)
    if active.sum() < 2:
        raise ValueError("need at least 2 subjects with data")
    const = float(np.sum(weights[active] * np.nansum(gammaln(counts[active] + 1.0), axis=1)))

    if np.nansum(counts) == 0:
        # all-zero data pushes mu to -inf; return the floored fit
        mu = float(np.log(MU_FLOOR))
        ll, _ = _pointwise_loglik_terms(S, J, mu, VAR_FLOOR, "laplace", n_quad)
        return GlmmFit(
            mu_hat=mu,
            var_intercept=0.0,
            var_time=None,
            rand_intercept=np.zeros(n),
            rand_time=None,
            window=1,
            converged=True,
            degenerate=True,
            loglik=float(gw @ ll) - const,
            no_data=~active,
        )

    mode_cache = {"r": None}

    def negloglik(theta, method):
        tau2 = np.exp(theta[1])
        ll, r_hat = _pointwise_loglik_terms(
            S, J, theta[0], tau2, method, n_quad, r0=mode_cache["r"]
        )
        mode_cache["r"] = r_hat
        return -float(gw @ ll)

    bounds = [_MU_BOUNDS, _LOG_VAR_BOUNDS]
    if start is None:
        # Laplace pass from moment-based starters, then AGQ refinement
        rate = (S + 0.5) / J
        pooled = np.log(float(gw @ S) / float(gw @ J) + 1e-12)
        lv = np.log(rate)
        var0 = float(np.clip(np.cov(lv, aweights=gw) if lv.size > 1 else 0.1, 1e-3, 50.0))
        x0 = np.array([pooled, np.log(var0)])
        res = _nm_minimize(lambda th: negloglik(th, "laplace"), x0, bounds, warm=False)
        converged = bool(res.success)
        theta = res.x
    else:
        # a neighboring fit's optimum: refine on the AGQ objective directly
        theta = np.array(start, dtype=float)
        converged = True
    if np.exp(theta[1]) > 10.0 * VAR_FLOOR:
        res = _nm_minimize(lambda th: negloglik(th, "agq"), theta, bounds, warm=True)
        converged = converged and bool(res.success)
        theta = res.x
        method = "agq"
    else:
        method = "laplace"

    mu_hat = float(theta[0])
    tau2_hat = float(np.exp(theta[1]))
    ll, r_group = _pointwise_loglik_terms(S, J, mu_hat, tau2_hat, method, n_quad)
    rand = np.zeros(n)
    rand[active] = r_group[inverse]
    return GlmmFit(
        mu_hat=mu_hat,
        var_intercept=tau2_hat if tau2_hat > 10.0 * VAR_FLOOR else 0.0,
        var_time=None,
        rand_intercept=rand,
        rand_time=None,
        window=1,
        converged=converged,
        degenerate=False,
        loglik=float(gw @ ll) - const,
        no_data=~active,
    )


# ---------------------------------------------------------------------------
# Gaussian point-wise variant (identity link), used as a transparent
# shrinkage reference in tests and for Gaussian surrogate data
# ---------------------------------------------------------------------------


def _fit_pointwise_gaussian(values: np.ndarray, weights, start) -> GlmmFit:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("values must be n x J")
    n = values.shape[0]
    weights = _check_weights(weights, n)
    J = np.sum(np.isfinite(values), axis=1).astype(float)
    active = J > 0
    if active.sum() < 2:
        raise ValueError("need at least 2 subjects with data")
    ybar = np.zeros(n)
    ybar[active] = np.nanmean(values[active], axis=1)
    ssw = np.zeros(n)
    ssw[active] = np.nansum((values[active] - ybar[active, None]) ** 2, axis=1)
    Ja, ya, sa, wa = J[active], ybar[active], ssw[active], weights[active]

    def negloglik(theta):
        mu, tau2, sig2 = theta[0], np.exp(theta[1]), np.exp(theta[2])
        var_mean = sig2 + Ja * tau2
        ll = -0.5 * (
            Ja * np.log(2.0 * np.pi)
            + (Ja - 1.0) * np.log(sig2)
            + np.log(var_mean)
            + sa / sig2
            + Ja * (ya - mu) ** 2 / var_mean
        )
        return -float(wa @ ll)

    if start is None:
        s2_0 = max(float(np.sum(sa) / max(np.sum(Ja - 1.0), 1.0)), 1e-6)
        t2_0 = max(float(np.var(ya)) - s2_0 / max(float(Ja.mean()), 1.0), 1e-3)
        x0 = np.array([float(wa @ ya / wa.sum()), np.log(t2_0), np.log(s2_0)])
        warm = False
    else:
        x0 = np.array(start, dtype=float)
        warm = True
    bounds = [(-1e6, 1e6), _LOG_VAR_BOUNDS, _LOG_VAR_BOUNDS]
    res = _nm_minimize(negloglik, x0, bounds, warm)
    mu, tau2, sig2 = float(res.x[0]), float(np.exp(res.x[1])), float(np.exp(res.x[2]))
    rand = np.zeros(n)
    rand[active] = Ja * tau2 * (ya - mu) / (sig2 + Ja * tau2)
    return GlmmFit(
        mu_hat=mu,
        var_intercept=tau2 if tau2 > 10.0 * VAR_FLOOR else 0.0,
        var_time=None,
        rand_intercept=rand,
        rand_time=None,
        window=1,
        converged=bool(res.success),
        degenerate=False,
        loglik=-float(res.fun),
        family="gaussian",
        sigma2=sig2,
        no_data=~active,
    )


# ---------------------------------------------------------------------------
# Window model
# ---------------------------------------------------------------------------


def _window_stats(counts: np.ndarray):
    S = np.nansum(counts, axis=1)                       # (n, D)
    N = np.sum(np.isfinite(counts), axis=1).astype(float)
    active = N.sum(axis=1) > 0
    return S, N, active


def _window_objective_parts(S, N, mu, tau0, tau1, u):
    """Penalized log-density value, gradient, and arrow-precision pieces at u."""
    m, D = S.shape
    dev = np.concatenate([np.zeros((m, 1)), u[:, 1:]], axis=1)
    eta = mu + u[:, :1] + dev
    lam = N * np.exp(np.clip(eta, -745.0, 700.0))
    obj = (
        np.sum(S * eta - lam, axis=1)
        - u[:, 0] ** 2 / (2.0 * tau0)
        - np.sum(u[:, 1:] ** 2, axis=1) / (2.0 * tau1)
    )
    grad = np.empty_like(u)
    grad[:, 0] = np.sum(S - lam, axis=1) - u[:, 0] / tau0
    grad[:, 1:] = (S - lam)[:, 1:] - u[:, 1:] / tau1
    return obj, grad, lam


def _window_modes(S, N, mu, tau0, tau1, u0=None):
    """Vectorized Newton for the per-subject mode of the window model.

    The negated Hessian is an arrow matrix diag(c_k + 1/tau1) bordered by
    the intercept row/column; the solve uses its Schur complement."""
    m, D = S.shape
    u = np.zeros((m, D)) if u0 is None else u0.copy()
    obj, grad, lam = _window_objective_parts(S, N, mu, tau0, tau1, u)
    scale = 1.0 + np.sum(S, axis=1)
    for _ in range(MAX_INNER_ITER):
        if np.max(np.abs(grad) / scale[:, None]) < INNER_TOL:
            break
        c = lam
        a_diag = c[:, 1:] + 1.0 / tau1                  # (m, D-1)
        a00 = np.sum(c, axis=1) + 1.0 / tau0
        ratio = c[:, 1:] / a_diag
        schur = a00 - np.sum(c[:, 1:] * ratio, axis=1)
        step = np.empty_like(u)
        step[:, 0] = (grad[:, 0] - np.sum(ratio * grad[:, 1:], axis=1)) / schur
        step[:, 1:] = (grad[:, 1:] - c[:, 1:] * step[:, [0]]) / a_diag
        # backtrack per subject until the penalized density does not decrease
        # (tolerance relative to the objective scale to absorb rounding)
        slack = 1e-9 * (1.0 + np.abs(obj))
        t = np.ones(m)
        for _ in range(25):
            new_u = u + t[:, None] * step
            new_obj, new_grad, new_lam = _window_objective_parts(
                S, N, mu, tau0, tau1, new_u
            )
            bad = new_obj < obj - slack
            if not np.any(bad):
                break
            t[bad] *= 0.5
        u, obj, grad, lam = new_u, new_obj, new_grad, new_lam
    return u, obj, lam


def _window_loglik_terms(S, N, mu, tau0, tau1, u0=None):
    m, D = S.shape
    if _kernels.HAVE_NUMBA:
        u = np.zeros((m, D)) if u0 is None else u0.copy()
        ll = _kernels.window_loglik_laplace(S, N, mu, tau0, tau1, u)
        return ll, u
    u, obj, lam = _window_modes(S, N, mu, tau0, tau1, u0)
    a_diag = lam[:, 1:] + 1.0 / tau1
    a00 = np.sum(lam, axis=1) + 1.0 / tau0
    schur = a00 - np.sum(lam[:, 1:] ** 2 / a_diag, axis=1)
    logdet_A = np.log(schur) + np.sum(np.log(a_diag), axis=1)
    ll = obj - 0.5 * (np.log(tau0) + (D - 1) * np.log(tau1) + logdet_A)
    return ll, u


def window_marginal_loglik(
    mu: float,
    tau2_intercept: float,
    tau2_time: float,
    counts: np.ndarray,
    weights=None,
) -> float:
    """Laplace marginal log-likelihood of the window model at the given
    parameters; the objective fit_window maximizes."""
    counts = _check_counts(counts, 3)
    weights = _check_weights(weights, counts.shape[0])
    S, N, active = _window_stats(counts)
    ll, _ = _window_loglik_terms(
        S[active],
        N[active],
        mu,
        max(tau2_intercept, VAR_FLOOR),
        max(tau2_time, VAR_FLOOR),
    )
    const = float(
        np.sum(weights[active] * np.nansum(gammaln(counts[active] + 1.0), axis=(1, 2)))
    )
    return float(weights[active] @ ll) - const


def fit_window(counts: np.ndarray, weights=None, start=None) -> GlmmFit:
    """Fit the window model to an n x J x D count array (D >= 2).

    Laplace-approximate maximum likelihood over (mu, log tau0^2, log tau1^2)
    by Nelder-Mead, with warm-started per-subject inner Newton solves.
    """
    counts = _check_counts(counts, 3)
    n, _, D = counts.shape
    if D < 2:
        raise ValueError("window model needs D >= 2; use fit_pointwise for D = 1")
    weights = _check_weights(weights, n)
    S, N, active = _window_stats(counts)
    if active.sum() < 2:
        raise ValueError("need at least 2 subjects with data")
    Sa, Na, wa = S[active], N[active], weights[active]
    const = float(
        np.sum(weights[active] * np.nansum(gammaln(counts[active] + 1.0), axis=(1, 2)))
    )

    if np.nansum(counts) == 0:
        mu = float(np.log(MU_FLOOR))
        ll, _ = _window_loglik_terms(Sa, Na, mu, VAR_FLOOR, VAR_FLOOR)
        return GlmmFit(
            mu_hat=mu,
            var_intercept=0.0,
            var_time=0.0,
            rand_intercept=np.zeros(n),
            rand_time=np.zeros((n, D - 1)),
            window=D,
            converged=True,
            degenerate=True,
            loglik=float(wa @ ll) - const,
            no_data=~active,
        )

    mode_cache = {"u": None}

    def negloglik(theta):
        ll, u = _window_loglik_terms(
            Sa, Na, theta[0], np.exp(theta[1]), np.exp(theta[2]), u0=mode_cache["u"]
        )
        mode_cache["u"] = u
        return -float(wa @ ll)

    if start is None:
        pooled = np.log(float(np.sum(wa[:, None] * Sa)) / float(np.sum(wa[:, None] * Na)) + 1e-12)
        rate = np.log((Sa.sum(axis=1) + 0.5) / np.maximum(Na.sum(axis=1), 1.0))
        var0 = float(np.clip(np.var(rate), 1e-3, 50.0))
        x0 = np.array([pooled, np.log(var0), np.log(max(var0 / 4.0, 1e-3))])
        warm = False
    else:
        x0 = np.array(start, dtype=float)
        warm = True

    bounds = [_MU_BOUNDS, _LOG_VAR_BOUNDS, _LOG_VAR_BOUNDS]
    res = _nm_minimize(negloglik, x0, bounds, warm)
    mu_hat = float(res.x[0])
    tau0_hat = float(np.exp(res.x[1]))
    tau1_hat = float(np.exp(res.x[2]))
    ll, u = _window_loglik_terms(Sa, Na, mu_hat, tau0_hat, tau1_hat)

    rand0 = np.zeros(n)
    rand0[active] = u[:, 0]
    randt = np.zeros((n, D - 1))
    randt[active] = u[:, 1:]
    return GlmmFit(
        mu_hat=mu_hat,
        var_intercept=tau0_hat if tau0_hat > 10.0 * VAR_FLOOR else 0.0,
        var_time=tau1_hat if tau1_hat > 10.0 * VAR_FLOOR else 0.0,
        rand_intercept=rand0,
        rand_time=randt,
        window=D,
        converged=bool(res.success),
        degenerate=False,
        loglik=float(wa @ ll) - const,
        no_data=~active,
    )
