"""Pseudo-outcomes and the spline regression of pseudo-outcomes on ``C``.

The estimated pseudo-outcome is

    f(z) = m(z, gamma_hat) + alpha_tilde(x) J(a) (y - gamma_hat(x)),

and the second stage reports ``theta(c) = b(c)^T beta`` with ``beta`` the
least-squares coefficients of the pseudo-outcomes on ``b(C)``. The same
number is the weighted mean ``(1/n) sum_i w(C_i) f(Z_i)`` with
``w(c') = b(c)^T Bbar^{-1} b(c')``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, as_dataset
from .estimands import LinearFunctional
from .nuisance import NuisanceFit, SplitTag
from .spline_basis import DomainError, GramMatrix, SolveInfo, solve_gram

SIGN_CONVENTION = "+alpha*J*(y-gamma)"


class NoSupportError(ValueError):
    """The target's cell in the ``b`` partition holds no evaluation rows."""


class CrossFitViolation(ValueError):
    """Pseudo-outcomes were evaluated on rows used to train a nuisance."""


@dataclass(frozen=True)
class PseudoOutcomeModel:
    """A fitted ``(gamma_hat, alpha_tilde)`` pair for one functional."""

    gamma_fit: NuisanceFit
    alpha_fit: NuisanceFit
    functional: LinearFunctional
    sign_convention: str = SIGN_CONVENTION

    def __post_init__(self):
        if self.gamma_fit.kind != "gamma" or self.alpha_fit.kind != "alpha":
            raise ValueError(
                f"expected (gamma, alpha) fits, got ({self.gamma_fit.kind}, {self.alpha_fit.kind})")
        if self.gamma_fit.basis is not self.alpha_fit.basis:
            raise ValueError("gamma and alpha fits must share the same q basis")

    def values(self, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Pseudo-outcomes at every row and a mask of rows in flagged nuisance cells."""
        g, g_flag = self.gamma_fit.predict_with_flags(data.x)
        a, a_flag = self.alpha_fit.predict_with_flags(data.x)
        fun = self.functional
        f = fun.m(data, lambda x: g) + a * fun.j(data.a) * (data.y - g)
        return f, g_flag | a_flag


def pseudo_outcome_values(fun: LinearFunctional, data: Dataset, gamma, alpha) -> np.ndarray:
    """``m(z, gamma) + alpha(x) J(a) (y - gamma(x))`` for arbitrary callables.

    With the true ``gamma_0`` and ``alpha_0`` this is the oracle pseudo-outcome.
    """
    g = np.asarray(gamma(data.x), dtype=float)
    return fun.m(data, gamma) + np.asarray(alpha(data.x), dtype=float) * fun.j(data.a) * (data.y - g)


def pseudo_outcome(model: PseudoOutcomeModel, z):
    """Pseudo-outcome of one observation (float) or of every row of a dataset."""
    data = as_dataset(z)
    f, _ = model.values(data)
    return f if isinstance(z, Dataset) else float(f[0])


def _c_points(b_basis, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c[:, None] if b_basis.dim == 1 else c[None, :]
    return c


def _target_points(b_basis, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=float)
    if t.ndim == 0:
        t = t.reshape(1, 1)
    elif t.ndim == 1:
        t = t[:, None] if b_basis.dim == 1 else t[None, :]
    return t


def target_coefficients(b_basis, B: GramMatrix, targets: np.ndarray):
    """``Bbar^{-1} b(c)`` for each target, with a no-support mask."""
    design = b_basis.design(targets)
    vecs = design.dense()
    out = np.zeros_like(vecs)
    no_support = np.zeros(len(targets), dtype=bool)
    infos = []
    if B.blocks is not None:
        trace = np.trace(B.blocks, axis1=1, axis2=2)
        no_support = trace[design.cells] <= 0
    for t in range(len(targets)):
        if no_support[t]:
            continue
        u, info = solve_gram(B, vecs[t])
        out[t] = u
        infos.append(info)
    return out, no_support, infos


def weights(b_basis, c_rows, target) -> np.ndarray:
    """Second-stage weights ``w(C_i) = b(c)^T Bbar^{-1} b(C_i)`` over the rows.

    Raises
    ------
    NoSupportError
        If no row of ``c_rows`` shares the target's cell.
    """
    c = _c_points(b_basis, c_rows)
    t = _target_points(b_basis, target)
    if t.shape[0] != 1:
        raise ValueError("weights takes a single target point")
    design = b_basis.design(c)
    B = design.gram()
    u, no_support, _ = target_coefficients(b_basis, B, t)
    if no_support[0]:
        raise NoSupportError(f"no evaluation rows in the cell of target {t[0].tolist()}")
    return design.predict(u[0])


@dataclass
class SecondStageFit:
    """Result of regressing pseudo-outcomes on ``b(C)``.

    ``theta`` is ``nan`` at targets flagged in ``no_support``.
    ``weight_bound`` is ``max |w| / r_n`` over targets, the finite constant
    in the weight bound ``|w| <= kappa r_n K_b``.
    """

    b_basis: object
    coefficients: np.ndarray
    gram: GramMatrix
    eval_split: SplitTag | None
    targets: np.ndarray
    theta: np.ndarray
    no_support: np.ndarray
    weight_bound: float = float("nan")
    solve_info: SolveInfo = field(default_factory=SolveInfo)

    def predict(self, c) -> np.ndarray:
        return self.b_basis.design(_target_points(self.b_basis, c)).predict(self.coefficients)


PATH_RTOL = 1e-8


def check_tags(eval_split: SplitTag | None, nuisance_splits, allow_overlap: bool) -> None:
    if allow_overlap or eval_split is None:
        return
    for tag in nuisance_splits:
        if tag is not None and tag.overlaps(eval_split):
            raise CrossFitViolation(
                f"pseudo-outcomes evaluated on fold {eval_split.fold} but the {tag.role} "
                f"nuisance was trained on fold {tag.fold}; pass allow_overlap=True only "
                "for the no-cross-fitting scheme")


def fit_theta(pseudo_values, b_basis, c_rows, targets, eval_split: SplitTag | None = None,
              nuisance_splits=(), allow_overlap: bool = False,
              check_paths: bool = True) -> tuple[SecondStageFit, np.ndarray]:
    """Second-stage estimate at each target.

    Both the coefficient path and the weighted-sum path are computed; with
    ``check_paths`` a disagreement beyond ``1e-8`` (relative) raises unless
    a block of ``Bbar`` needed a ridge.
    """
    check_tags(eval_split, nuisance_splits, allow_overlap)
    f = np.asarray(pseudo_values, dtype=float).reshape(-1)
    c = _c_points(b_basis, c_rows)
    if c.shape[0] != f.shape[0]:
        raise ValueError(f"{f.shape[0]} pseudo-outcomes for {c.shape[0]} rows of C")
    t = _target_points(b_basis, targets)
    try:
        b_basis.cell_index(t)
    except DomainError as exc:
        raise DomainError(f"target outside the C domain: {exc}") from None
    n = f.shape[0]
    design = b_basis.design(c)
    B = design.gram()
    beta, info = solve_gram(B, design.moment(f) / n)
    theta = b_basis.design(t).predict(beta)

    u, no_support, _ = target_coefficients(b_basis, B, t)
    W = design.dense() @ u.T  # n x targets
    theta_w = (W * f[:, None]).mean(axis=0)
    theta = np.where(no_support, np.nan, theta)
    # ridged blocks are ill-conditioned; the two paths only agree to rounding there
    if check_paths and not info.ridged_blocks:
        scale = np.abs(W * f[:, None]).mean(axis=0) + np.finfo(float).tiny
        gap = np.abs(theta - theta_w)[~no_support] / scale[~no_support]
        if gap.size and gap.max() > PATH_RTOL:
            raise RuntimeError(
                f"coefficient and weighted-sum second-stage paths disagree (rel. gap {gap.max():.2e})")
    r_n = getattr(b_basis, "size", u.shape[1])
    bound = float(np.max(np.abs(W[:, ~no_support]))) / r_n if (~no_support).any() else float("nan")
    fit = SecondStageFit(b_basis, beta, B, eval_split, t, theta, no_support, bound, info)
    return fit, theta


def oracle_theta(gamma0, alpha0, fun: LinearFunctional, b_basis, data: Dataset, targets,
                 eval_split: SplitTag | None = None) -> np.ndarray:
    """Second stage with the true pseudo-outcome ``f_0`` (simulation only)."""
    if gamma0 is None or alpha0 is None:
        raise RuntimeError("oracle_theta needs the true nuisances; only available in simulation mode")
    f0 = pseudo_outcome_values(fun, data, gamma0, alpha0)
    _, theta = fit_theta(f0, b_basis, data.c, targets, eval_split=eval_split, allow_overlap=True)
    return theta
