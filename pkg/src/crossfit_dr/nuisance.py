"""Series estimates of the nuisances ``gamma_0`` and ``alpha_0``.

Both nuisances use the features ``p = J q(X)``:

* ``gamma_hat``: least squares of ``Y`` on ``p``,
  ``delta = (sum p p^T)^{-1} sum p Y``;
* ``alpha_tilde``: the moment estimator
  ``delta = (sum p p^T)^{-1} sum v_q(Z)``, which needs no observed
  ``alpha_0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DiscretePopulation
from .estimands import LinearFunctional, v_q_entrywise
from .spline_basis import (
    GramMatrix,
    SingularGramError,
    SolveInfo,
    Whitener,
    solve_gram,
    solve_gram_strict,
)


class NuisanceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SplitTag:
    """Which fold a fit was trained on and in which role.

    ``fold`` is ``None`` when the whole sample was used.
    """

    role: str
    fold: int | None = None

    def overlaps(self, other: "SplitTag") -> bool:
        return self.fold is None or other.fold is None or self.fold == other.fold


@dataclass
class NuisanceFit:
    """Fitted coefficients of ``gamma_hat`` or ``alpha_tilde`` on a basis."""

    kind: str
    coefficients: np.ndarray
    basis: object
    split: SplitTag | None
    gram: GramMatrix
    solve_info: SolveInfo = field(default_factory=SolveInfo)

    @property
    def flagged_cells(self) -> tuple[int, ...]:
        """Cells without usable ``J=1`` rows (zero coefficients) or that needed a ridge."""
        return tuple(sorted(set(self.solve_info.empty_blocks) | set(self.solve_info.ridged_blocks)))

    def predict(self, x) -> np.ndarray:
        return self.basis.design(x).predict(self.coefficients)

    __call__ = predict

    def predict_with_flags(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Predictions and a mask of points falling in flagged cells."""
        design = self.basis.design(x)
        values = design.predict(self.coefficients)
        if hasattr(design, "cells") and self.flagged_cells:
            flag = np.isin(design.cells, self.flagged_cells)
        else:
            flag = np.zeros(len(design), dtype=bool)
        return values, flag


def _p_gram(data: Dataset, fun: LinearFunctional, basis):
    J = fun.j(data.a)
    design = basis.design(data.x)
    G = design.gram(J)
    G.j_weighted = True
    return design, J, G


def _solve(G, rhs, kind):
    coef, info = solve_gram(G, rhs)
    if info.ridged_blocks:
        warnings.warn(f"{kind}: singular Gram block(s) {list(info.ridged_blocks)[:5]} "
                      f"solved with ridge {info.ridge:.2e}", NuisanceWarning, stacklevel=3)
    if info.empty_blocks and G.blocks is not None:
        warnings.warn(f"{kind}: {len(info.empty_blocks)} cell(s) without J=1 rows "
                      "get zero coefficients", NuisanceWarning, stacklevel=3)
    return coef, info


def fit_gamma(data: Dataset, fun: LinearFunctional, basis, split: SplitTag | None = None) -> NuisanceFit:
    """Least squares of ``Y`` on ``p = J q(X)``."""
    if len(data) == 0:
        raise ValueError("fit_gamma: empty split")
    design, J, G = _p_gram(data, fun, basis)
    if not J.any():
        raise ValueError(f"fit_gamma: no rows with J=1 for estimand {fun.name!r}")
    rhs = design.moment(J * data.y) / len(data)
    coef, info = _solve(G, rhs, "fit_gamma")
    return NuisanceFit("gamma", coef, basis, split, G, info)


def fit_alpha(data: Dataset, fun: LinearFunctional, basis, split: SplitTag | None = None) -> NuisanceFit:
    """Moment estimator ``(sum p p^T)^{-1} sum v_q(Z)`` of the Riesz representer."""
    if len(data) == 0:
        raise ValueError("fit_alpha: empty split")
    design, J, G = _p_gram(data, fun, basis)
    if fun.v_weight is not None:
        rhs = design.moment(np.asarray(fun.v_weight(data.a, data.y), dtype=float))
    else:
        rhs = v_q_entrywise(fun, data, basis).sum(axis=0)
    coef, info = _solve(G, rhs / len(data), "fit_alpha")
    return NuisanceFit("alpha", coef, basis, split, G, info)


def project_population(fn_true, fun: LinearFunctional, basis, population: DiscretePopulation,
                       check: bool = True) -> np.ndarray:
    """Coefficients ``E[p p^T]^{-1} E[p f]`` of the population projection onto ``p``.

    With ``check`` the result is compared against the projection onto ``q``
    within the ``J=1`` subpopulation, which must coincide.
    """
    J = fun.j(population.a)
    design = basis.design(population.x)
    w = population.prob * J
    G = design.gram(w, normalize=False)
    rhs = design.moment(w * np.asarray(fn_true(population.x), dtype=float))
    coef = solve_gram_strict(G, rhs)
    if check:
        other = project_subpopulation(fn_true, fun, basis, population)
        scale = max(1.0, float(np.max(np.abs(coef))))
        if np.max(np.abs(coef - other)) > 1e-8 * scale:
            raise RuntimeError("full-population and J=1-subpopulation projections disagree")
    return coef


def project_subpopulation(fn_true, fun: LinearFunctional, basis, population: DiscretePopulation) -> np.ndarray:
    """Projection of ``f`` onto ``q`` under the law of ``X`` given ``J=1``."""
    J = fun.j(population.a).astype(bool)
    if not J.any():
        raise SingularGramError("population has no J=1 mass")
    prob = population.prob[J]
    prob = prob / prob.sum()
    x = population.x[J]
    Q = basis.design(x).dense()
    G = (Q * prob[:, None]).T @ Q
    rhs = Q.T @ (prob * np.asarray(fn_true(x), dtype=float))
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise SingularGramError("subpopulation Gram is singular") from exc
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def population_gram(fun: LinearFunctional, basis, population: DiscretePopulation) -> GramMatrix:
    """``E[p p^T]`` under a finite population."""
    w = population.prob * fun.j(population.a)
    G = basis.design(population.x).gram(w, normalize=False)
    G.j_weighted = True
    return G


# ---------------------------------------------------------------------------
# stability indicators
# ---------------------------------------------------------------------------

HALF = 0.5
THREE_HALVES = 1.5


@dataclass
class StabilityDiagnostics:
    """Eigenvalue summaries of the whitened split Grams and the derived indicators.

    ``indicator_hat`` is ``lambda_min(Sigma_hat) >= 1/2``, likewise for
    ``indicator_tilde``. ``indicator_bar`` requires the target-weighted Gram
    to be p.s.d., ``lambda_max(Sigma_bar) <= 3/2`` and
    ``lambda_min(B_bar) >= 1/2``.
    """

    lambda_min_hat: float
    lambda_min_tilde: float
    lambda_max_bar: float = float("nan")
    bbar_lambda_min: float = float("nan")
    weighted_psd: bool | None = None

    @property
    def indicator_hat(self) -> bool:
        return bool(self.lambda_min_hat >= HALF)

    @property
    def indicator_tilde(self) -> bool:
        return bool(self.lambda_min_tilde >= HALF)

    @property
    def indicator_bar(self) -> bool:
        return bool(self.weighted_psd) and bool(self.lambda_max_bar <= THREE_HALVES) \
            and bool(self.bbar_lambda_min >= HALF)

    def to_dict(self) -> dict:
        return {
            "lambda_min_hat": self.lambda_min_hat,
            "lambda_min_tilde": self.lambda_min_tilde,
            "lambda_max_bar": self.lambda_max_bar,
            "bbar_lambda_min": self.bbar_lambda_min,
            "weighted_psd": self.weighted_psd,
            "indicator_hat": self.indicator_hat,
            "indicator_tilde": self.indicator_tilde,
            "indicator_bar": self.indicator_bar,
        }


@dataclass
class SplitGrams:
    sigma_hat: GramMatrix
    sigma_tilde: GramMatrix
    sigma_bar: GramMatrix | None = None
    sigma_bar_weighted: GramMatrix | None = None
    b_bar: GramMatrix | None = None


def diagnostics(split_grams: SplitGrams, whitener: Whitener, b_whitener: Whitener | None = None) -> StabilityDiagnostics:
    """Whiten the split Grams with the reference transform and read off eigenvalues."""
    lam_hat = whitener.apply(split_grams.sigma_hat).lambda_min
    lam_tilde = whitener.apply(split_grams.sigma_tilde).lambda_min
    lam_bar = float("nan")
    if split_grams.sigma_bar is not None:
        lam_bar = whitener.apply(split_grams.sigma_bar).lambda_max
    b_min = float("nan")
    if split_grams.b_bar is not None:
        b_min = (b_whitener.apply(split_grams.b_bar) if b_whitener is not None else split_grams.b_bar).lambda_min
    psd = None
    if split_grams.sigma_bar_weighted is not None:
        psd = split_grams.sigma_bar_weighted.is_psd()
    return StabilityDiagnostics(lam_hat, lam_tilde, lam_bar, b_min, psd)
