"""Cross-fitted doubly robust estimation of conditional linear functionals with spline series."""

from .crossfit import CrossFitEstimate, CrossFitScheme, run, split
from .data import AffineMap, Dataset, DiscretePopulation, ObservationZ
from .estimands import COV, CTRL, TRT, LinearFunctional, custom_functional, get_functional
from .nuisance import NuisanceFit, StabilityDiagnostics, fit_alpha, fit_gamma, project_population
from .second_stage import PseudoOutcomeModel, fit_theta, oracle_theta, pseudo_outcome, weights
from .spline_basis import BasisSpec, SplineBasis, TransformedBasis, build_basis

__all__ = [
    "AffineMap", "BasisSpec", "COV", "CTRL", "CrossFitEstimate", "CrossFitScheme", "Dataset",
    "DiscretePopulation", "LinearFunctional", "NuisanceFit", "ObservationZ", "PseudoOutcomeModel",
    "SplineBasis", "StabilityDiagnostics", "TRT", "TransformedBasis", "build_basis",
    "custom_functional", "fit_alpha", "fit_gamma", "fit_theta", "get_functional", "oracle_theta",
    "project_population", "pseudo_outcome", "run", "split", "weights",
]
__version__ = "0.1.0"
