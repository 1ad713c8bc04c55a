"""Simulation designs with known truth and Monte Carlo experiment runners."""

from .dgp import (
    DGPSpec,
    PRESETS,
    piecewise_cov_dgp,
    cate_dgp,
    monte_carlo_theta,
    quadrature_population,
    rate_dgp,
    sample,
    smooth_dgp,
    true_theta,
)
from .experiments import (
    DiagnosticsSample,
    MCReport,
    bias_decomposition_cov,
    cube_root_rule,
    fit_slope,
    mean_zero_diagnostics,
    rate_experiment,
    simulate,
)

__all__ = [
    "DGPSpec", "DiagnosticsSample", "MCReport", "PRESETS", "piecewise_cov_dgp", "bias_decomposition_cov",
    "cate_dgp", "cube_root_rule", "fit_slope", "mean_zero_diagnostics", "monte_carlo_theta",
    "quadrature_population", "rate_dgp", "rate_experiment", "sample", "simulate", "smooth_dgp", "true_theta",
]
