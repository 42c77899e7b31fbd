"""Hybrid sparse/diffuse channel estimation with atomic norm regularization."""

from . import _kernels
from .signal_model import (
    AhsdChannel, FadingConfig, MeasurementSet, ModelDims, build_diffuse_basis, build_steering,
    draw_channel, draw_pilots_and_observe, min_separation, sigma_for_snr,
)
from .solver import (
    HalsSolution, Hyperparams, SolverOptions, check_optimality, select_hyperparams, solve_anm,
    solve_p0, solve_p1, solve_p2, tune_tau,
)

__version__ = "0.1.0"
BACKEND = _kernels.BACKEND
