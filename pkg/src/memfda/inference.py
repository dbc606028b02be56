"""Nonparametric bootstrap for point-wise confidence bands of the
coefficient curve and intervals for the scalar coefficients.

Whole subjects are resampled with replacement, keeping each subject's
replicate curves, covariates, and outcome together, and the entire
two-stage pipeline is rerun on every resample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MultiLevelSample
from .pipeline import fit_two_stage, has_truth

MAX_REDRAWS = 10
MAX_FAILURE_SHARE = 0.05


@dataclass
class BootstrapBands:
    """Point estimate plus percentile bands from B pipeline reruns."""

    t: np.ndarray
    estimate: np.ndarray          # point-estimate curve
    lower: np.ndarray
    upper: np.ndarray
    curves: np.ndarray            # (B_ok, T) replicate curves
    coef_names: list
    coef_estimate: np.ndarray
    coef_lower: np.ndarray
    coef_upper: np.ndarray
    level: float
    indices: np.ndarray           # (B_ok, n) resample indices, for audit
    n_failed: int
    method: str
    meta: dict = field(default_factory=dict)


def bootstrap(
    data: MultiLevelSample,
    method: str,
    K_n: int = 15,
    B: int = 200,
    level: float = 0.95,
    seed: int = 0,
    D: int = 3,
    fve_target: float = 0.99,
) -> BootstrapBands:
    """Percentile bootstrap of the two-stage fit.

    Resamples with an all-equal outcome are redrawn up to 10 times before
    counting as failures; more than 5% failures aborts.
    """
    if B < 50:
        raise ValueError("B must be at least 50")
    if not (0.0 < level < 1.0):
        raise ValueError("level must be in (0, 1)")
    if method == "Oracle" and not has_truth(data):
        raise ValueError("Oracle bootstrap needs true latent curves in the data")

    point = fit_two_stage(data, method, K_n=K_n, D=D, fve_target=fve_target)
    n = data.n
    streams = np.random.SeedSequence([int(seed), 0x626F6F74]).spawn(B)

    curves, coefs, indices = [], [], []
    n_failed = 0
    for b in range(B):
        rng = np.random.default_rng(streams[b])
        idx = None
        for _ in range(MAX_REDRAWS):
            cand = rng.integers(0, n, size=n)
            if data.Y[cand].min() != data.Y[cand].max():
                idx = cand
                break
        if idx is None:
            n_failed += 1
            continue
        try:
            fit = fit_two_stage(data.subset(idx), method, K_n=K_n, D=D, fve_target=fve_target)
        except (ValueError, np.linalg.LinAlgError):
            n_failed += 1
            continue
        curves.append(fit.beta_curve)
        coefs.append(fit.alpha)
        indices.append(idx)

    if n_failed > MAX_FAILURE_SHARE * B:
        raise RuntimeError(
            f"bootstrap failed on {n_failed}/{B} resamples (> {MAX_FAILURE_SHARE:.0%})"
        )

    curves = np.asarray(curves)
    coefs = np.asarray(coefs)
    lo_q, hi_q = 100.0 * (1.0 - level) / 2.0, 100.0 * (1.0 + level) / 2.0
    names = ["Intercept"] + (
        list(data.z_names) if data.z_names else [f"Z{j+1}" for j in range(data.Z.shape[1])]
    )
    return BootstrapBands(
        t=data.grid.points.copy(),
        estimate=point.beta_curve,
        lower=np.percentile(curves, lo_q, axis=0),
        upper=np.percentile(curves, hi_q, axis=0),
        curves=curves,
        coef_names=names,
        coef_estimate=point.alpha,
        coef_lower=np.percentile(coefs, lo_q, axis=0),
        coef_upper=np.percentile(coefs, hi_q, axis=0),
        level=level,
        indices=np.asarray(indices),
        n_failed=n_failed,
        method=method,
        meta={"B": B, "seed": seed, "K_n": K_n, "D": D},
    )
