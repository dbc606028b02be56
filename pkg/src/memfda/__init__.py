"""Two-stage measurement-error correction for multi-level generalized
functional linear regression, with a simulation engine, comparator
estimators, bootstrap inference, and a Monte Carlo benchmark harness."""

from .core import (
    CovarianceKernel,
    FunctionalGrid,
    LinkFunction,
    MultiLevelSample,
    integrate_product,
    kernel_matrix,
)
from .glmm import GlmmFit, fit_pointwise, fit_window, predict_x
from .inference import BootstrapBands, bootstrap
from .mem import (
    ReconstructedCovariate,
    average_reconstruct,
    mp_mem,
    naive_reconstruct,
    oracle_reconstruct,
    up_mem,
)
from .metrics import MetricReport, abias2, aimse, avar, covariate_avar
from .pace import FpcaModel, fit_fpca, pace_reconstruct, pace_scores
from .pipeline import fit_two_stage, reconstruct
from .simulate import ScenarioConfig, SimulatedDataset, make_dataset
from .sofr import SofrFit, SplineBasis, build_basis, fit_logistic, functional_design
from .sofr import estimate as estimate_sofr
from .benchmark import run_scenario

__version__ = "0.1.0"

__all__ = [
    "BootstrapBands",
    "CovarianceKernel",
    "FpcaModel",
    "FunctionalGrid",
    "GlmmFit",
    "LinkFunction",
    "MetricReport",
    "MultiLevelSample",
    "ReconstructedCovariate",
    "ScenarioConfig",
    "SimulatedDataset",
    "SofrFit",
    "SplineBasis",
    "abias2",
    "aimse",
    "avar",
    "average_reconstruct",
    "bootstrap",
    "build_basis",
    "covariate_avar",
    "estimate_sofr",
    "fit_fpca",
    "fit_logistic",
    "fit_pointwise",
    "fit_two_stage",
    "fit_window",
    "functional_design",
    "integrate_product",
    "kernel_matrix",
    "make_dataset",
    "mp_mem",
    "naive_reconstruct",
    "oracle_reconstruct",
    "pace_reconstruct",
    "pace_scores",
    "predict_x",
    "reconstruct",
    "run_scenario",
    "up_mem",
]
