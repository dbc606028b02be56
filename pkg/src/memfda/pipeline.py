"""Glue for the two-stage fit: dispatch a reconstruction method by name and
run stage two on the result.  Used by the bootstrap, the benchmark harness,
and the CLI."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import mem, pace, sofr
from .core import MultiLevelSample

METHOD_ALIASES = {
    "up_mem": "UP_MEM",
    "mp_mem": "MP_MEM",
    "pace": "PACE",
    "average": "Average",
    "naive": "Naive",
    "oracle": "Oracle",
}


def canonical_method(name: str) -> str:
    key = name.strip()
    if key in mem.METHODS:
        return key
    low = key.lower()
    if low in METHOD_ALIASES:
        return METHOD_ALIASES[low]
    raise ValueError(f"unknown method {name!r}; choose from {sorted(METHOD_ALIASES)}")


def has_truth(data: MultiLevelSample) -> bool:
    return data.X is not None


def reconstruct(
    data: MultiLevelSample,
    method: str,
    D: int = 3,
    fve_target: float = 0.99,
) -> mem.ReconstructedCovariate:
    """Run one stage-one reconstruction on the sample's surrogate curves."""
    method = canonical_method(method)
    if method == "UP_MEM":
        return mem.up_mem(data.W, weights=data.weights)
    if method == "MP_MEM":
        return mem.mp_mem(data.W, D=D, weights=data.weights)
    if method == "PACE":
        return pace.pace_reconstruct(data.W, data.grid, fve_target=fve_target)
    if method == "Average":
        return mem.average_reconstruct(data.W)
    if method == "Naive":
        return mem.naive_reconstruct(data.W)
    # Oracle
    if not has_truth(data):
        raise ValueError("Oracle reconstruction needs true latent curves (simulated data)")
    return mem.oracle_reconstruct(data.X)


def fit_two_stage(
    data: MultiLevelSample,
    method: str,
    K_n: int = 15,
    D: int = 3,
    fve_target: float = 0.99,
    reconstruction: Optional[mem.ReconstructedCovariate] = None,
) -> sofr.SofrFit:
    """Reconstruct (unless given) and fit the outcome model."""
    if reconstruction is None:
        reconstruction = reconstruct(data, method, D=D, fve_target=fve_target)
    return sofr.estimate(
        reconstruction,
        data.Z,
        data.Y,
        K_n=K_n,
        weights=data.weights,
        z_names=data.z_names,
        grid=data.grid,
    )
