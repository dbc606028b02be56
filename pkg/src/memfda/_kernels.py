"""JIT-compiled inner loops for the mixed-model marginal likelihoods.

The glmm module falls back to its vectorized numpy implementations when
numba is unavailable; these kernels compute the same quantities subject by
subject in nopython loops, which is what the Nelder-Mead outer loop hammers.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return deco


INNER_TOL = 1e-12
MAX_INNER_ITER = 100


@njit(cache=True)
def _pw_mode(S, J, mu, tau2, r0):
    r = r0
    scale = 1.0 + S
    for _ in range(MAX_INNER_ITER):
        e = mu + r
        if e > 700.0:
            e = 700.0
        lam = J * np.exp(e)
        g = S - lam - r / tau2
        if abs(g) < INNER_TOL * scale:
            break
        step = g / (lam + 1.0 / tau2)
        if step > 5.0:
            step = 5.0
        elif step < -5.0:
            step = -5.0
        r += step
    return r


@njit(cache=True)
def pointwise_loglik_laplace(S, J, mu, tau2, r):
    """Per-group Laplace log-likelihood; r is the warm-start/mode buffer."""
    ll = np.empty(S.size)
    for g in range(S.size):
        rg = _pw_mode(S[g], J[g], mu, tau2, r[g])
        r[g] = rg
        e = mu + rg
        if e > 700.0:
            e = 700.0
        lam = J[g] * np.exp(e)
        A = lam + 1.0 / tau2
        f = S[g] * (mu + rg) - lam - rg * rg / (2.0 * tau2)
        ll[g] = f - 0.5 * np.log(tau2) - 0.5 * np.log(A)
    return ll


@njit(cache=True)
def pointwise_loglik_agq(S, J, mu, tau2, r, x, logw):
    """Per-group adaptive Gauss-Hermite log-likelihood."""
    K = x.size
    sqrt2 = np.sqrt(2.0)
    half_log_2pi_tau2 = 0.5 * np.log(2.0 * np.pi * tau2)
    ll = np.empty(S.size)
    q = np.empty(K)
    for g in range(S.size):
        rg = _pw_mode(S[g], J[g], mu, tau2, r[g])
        r[g] = rg
        e = mu + rg
        if e > 700.0:
            e = 700.0
        lam = J[g] * np.exp(e)
        shat = 1.0 / np.sqrt(lam + 1.0 / tau2)
        qmax = -np.inf
        for k in range(K):
            node = rg + sqrt2 * shat * x[k]
            en = mu + node
            if en > 700.0:
                en = 700.0
            qk = S[g] * (mu + node) - J[g] * np.exp(en) - node * node / (2.0 * tau2) + logw[k]
            q[k] = qk
            if qk > qmax:
                qmax = qk
        total = 0.0
        for k in range(K):
            total += np.exp(q[k] - qmax)
        ll[g] = 0.5 * np.log(2.0) + np.log(shat) - half_log_2pi_tau2 + qmax + np.log(total)
    return ll


@njit(cache=True)
def _win_obj(Si, Ni, mu, tau0, tau1, u, lam):
    D = Si.size
    obj = -u[0] * u[0] / (2.0 * tau0)
    for d in range(D):
        m = u[0] + (u[d] if d >= 1 else 0.0)
        e = mu + m
        if e > 700.0:
            e = 700.0
        lam[d] = Ni[d] * np.exp(e)
        obj += Si[d] * (mu + m) - lam[d]
        if d >= 1:
            obj -= u[d] * u[d] / (2.0 * tau1)
    return obj


@njit(cache=True)
def window_loglik_laplace(S, N, mu, tau0, tau1, U):
    """Per-subject Laplace log-likelihoods of the window model.

    U is the (m, D) warm-start buffer, overwritten with the new modes.
    The per-subject Newton solves the arrow precision system exactly.
    """
    m, D = S.shape
    ll = np.empty(m)
    u = np.empty(D)
    unew = np.empty(D)
    lam = np.empty(D)
    lamnew = np.empty(D)
    grad = np.empty(D)
    step = np.empty(D)
    for i in range(m):
        for d in range(D):
            u[d] = U[i, d]
        obj = _win_obj(S[i], N[i], mu, tau0, tau1, u, lam)
        scale = 1.0
        for d in range(D):
            scale += S[i, d]
        for _ in range(MAX_INNER_ITER):
            g0 = -u[0] / tau0
            maxg = 0.0
            for d in range(D):
                g0 += S[i, d] - lam[d]
            grad[0] = g0
            if abs(g0) > maxg:
                maxg = abs(g0)
            for d in range(1, D):
                gd = S[i, d] - lam[d] - u[d] / tau1
                grad[d] = gd
                if abs(gd) > maxg:
                    maxg = abs(gd)
            if maxg < INNER_TOL * scale:
                break
            a00 = 1.0 / tau0
            for d in range(D):
                a00 += lam[d]
            schur = a00
            rhs0 = grad[0]
            for d in range(1, D):
                ad = lam[d] + 1.0 / tau1
                ratio = lam[d] / ad
                schur -= lam[d] * ratio
                rhs0 -= ratio * grad[d]
            s0 = rhs0 / schur
            step[0] = s0
            for d in range(1, D):
                step[d] = (grad[d] - lam[d] * s0) / (lam[d] + 1.0 / tau1)
            slack = 1e-9 * (1.0 + abs(obj))
            t = 1.0
            newobj = obj
            for _bt in range(25):
                for d in range(D):
                    unew[d] = u[d] + t * step[d]
                newobj = _win_obj(S[i], N[i], mu, tau0, tau1, unew, lamnew)
                if newobj >= obj - slack:
                    break
                t *= 0.5
            for d in range(D):
                u[d] = unew[d]
                lam[d] = lamnew[d]
            obj = newobj
        a00 = 1.0 / tau0
        for d in range(D):
            a00 += lam[d]
        schur = a00
        logdet = 0.0
        for d in range(1, D):
            ad = lam[d] + 1.0 / tau1
            schur -= lam[d] * lam[d] / ad
            logdet += np.log(ad)
        logdet += np.log(schur)
        ll[i] = obj - 0.5 * (np.log(tau0) + (D - 1) * np.log(tau1) + logdet)
        for d in range(D):
            U[i, d] = u[d]
    return ll
