"""Linear functionals ``theta = E[m(Z, gamma_0)]`` and their moment pieces.

A functional is described by the indicator ``J = j(A)``, which selects the
subpopulation on which ``gamma_0(x) = E[Y | X=x, J=1]`` is defined, and by
``m(z, gamma)``, affine in ``gamma``. Built-ins:

=======  ========  ==================  ================  ============
name     J         m(z, gamma)         alpha_0(x)        v_q(z)
=======  ========  ==================  ================  ============
cov      1         a (y - gamma(x))    -E[A | X=x]       -a q(x)
trt      a         gamma(x)            1 / E[A | X=x]    q(x)
ctrl     1 - a     gamma(x)            1 / E[1-A | X=x]  q(x)
=======  ========  ==================  ================  ============

The conditional average treatment effect is ``trt - ctrl``, composed by the
cross-fitting layer rather than defined here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, DiscretePopulation, as_dataset

GammaFn = Callable[[np.ndarray], np.ndarray]
# m_rule(x, a, y, gamma) -> per-row values; gamma is evaluated on rows of x
MRule = Callable[[np.ndarray, np.ndarray, np.ndarray, GammaFn], np.ndarray]

ESTIMAND_NAMES = ("cov", "trt", "ctrl", "cate")


def zero_function(x) -> np.ndarray:
    return np.zeros(np.atleast_2d(np.asarray(x, dtype=float)).shape[0])


@dataclass(frozen=True)
class LinearFunctional:
    """An estimand's ``(J, m)`` pair.

    ``v_weight``, when given, states that ``v_q(z) = v_weight(a, y) * q(x)``,
    which lets the moment pipeline avoid evaluating ``m`` once per basis
    function. Custom functionals can leave it out.
    """

    name: str
    j_rule: Callable[[np.ndarray], np.ndarray]
    m_rule: MRule
    v_weight: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    binary_treatment: bool = False

    def validate(self, a) -> None:
        if self.binary_treatment:
            a = np.asarray(a, dtype=float)
            bad = ~np.isin(a, (0.0, 1.0))
            if bad.any():
                raise ValueError(
                    f"estimand {self.name!r} needs binary treatment; "
                    f"found a={float(a[bad][0])!r} ({int(bad.sum())} row(s))")

    def j(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        self.validate(a)
        return np.asarray(self.j_rule(a), dtype=float)

    def m(self, data: Dataset, gamma: GammaFn) -> np.ndarray:
        return np.asarray(self.m_rule(data.x, data.a, data.y, gamma), dtype=float)


def _m_cov(x, a, y, gamma):
    return a * (y - gamma(x))


def _m_gamma(x, a, y, gamma):
    return np.asarray(gamma(x), dtype=float) + 0.0 * a


COV = LinearFunctional(
    name="cov",
    j_rule=lambda a: np.ones_like(a),
    m_rule=_m_cov,
    v_weight=lambda a, y: -a,
)
TRT = LinearFunctional(
    name="trt",
    j_rule=lambda a: a,
    m_rule=_m_gamma,
    v_weight=lambda a, y: np.ones_like(a),
    binary_treatment=True,
)
CTRL = LinearFunctional(
    name="ctrl",
    j_rule=lambda a: 1.0 - a,
    m_rule=_m_gamma,
    v_weight=lambda a, y: np.ones_like(a),
    binary_treatment=True,
)

BUILTINS = {"cov": COV, "trt": TRT, "ctrl": CTRL}


def get_functional(name: str) -> LinearFunctional:
    try:
        return BUILTINS[name]
    except KeyError:
        raise ValueError(
            f"unknown estimand {name!r}; expected one of {sorted(BUILTINS)} "
            "(use 'cate' through the cross-fitting entry points)") from None


def custom_functional(name: str, j_rule, m_rule: MRule, binary_treatment: bool = False) -> LinearFunctional:
    """A user-defined functional; ``v_q`` is derived entrywise from ``m_rule``."""
    if name in ESTIMAND_NAMES:
        raise ValueError(f"{name!r} is reserved for a built-in estimand")
    return LinearFunctional(name, j_rule, m_rule, None, binary_treatment)


def alpha_from_propensity(fun: LinearFunctional, mean_a: Callable) -> Callable:
    """Riesz representer of a built-in functional given ``x -> E[A | X=x]``."""
    if fun is COV or fun.name == "cov":
        return lambda x: -np.asarray(mean_a(x))
    if fun is TRT or fun.name == "trt":
        return lambda x: 1.0 / np.asarray(mean_a(x))
    if fun is CTRL or fun.name == "ctrl":
        return lambda x: 1.0 / (1.0 - np.asarray(mean_a(x)))
    raise ValueError(f"no closed-form representer for custom functional {fun.name!r}")


def j_indicator(fun: LinearFunctional, a) -> np.ndarray | float:
    out = fun.j(np.atleast_1d(a))
    return float(out[0]) if np.ndim(a) == 0 else out


def m_eval(fun: LinearFunctional, z, gamma: GammaFn) -> np.ndarray | float:
    data = as_dataset(z)
    out = fun.m(data, gamma)
    return float(out[0]) if not isinstance(z, Dataset) else out


def v_q_eval(fun: LinearFunctional, z, basis) -> np.ndarray:
    """Rows ``v_q(z_i)``, the ``j``-th entry being ``m(z, q_j) - m(z, 0)``.

    Returns a vector for a single observation and an ``n x k`` matrix for a
    :class:`Dataset`.
    """
    data = as_dataset(z)
    if fun.v_weight is not None:
        out = basis.design(data.x).dense() * np.asarray(fun.v_weight(data.a, data.y))[:, None]
    else:
        out = v_q_entrywise(fun, data, basis)
    return out if isinstance(z, Dataset) else out[0]


def v_q_entrywise(fun: LinearFunctional, data: Dataset, basis) -> np.ndarray:
    """``v_q`` computed from ``m_rule`` one basis function at a time."""
    base = fun.m(data, zero_function)
    out = np.empty((len(data), basis.size))
    for j in range(basis.size):
        def q_j(x, j=j):
            return basis.design(x).dense()[:, j]
        out[:, j] = fun.m(data, q_j) - base
    return out


def population_gamma0(fun: LinearFunctional, pop: DiscretePopulation) -> np.ndarray:
    """``E[Y | X, J=1]`` at every atom of ``pop``."""
    return pop.conditional_mean(pop.y, fun.j(pop.a))


def population_alpha0(fun: LinearFunctional, pop: DiscretePopulation) -> np.ndarray:
    """Built-in representers evaluated by enumeration at every atom."""
    mean_a = pop.conditional_mean(pop.a)
    return alpha_from_propensity(fun, lambda x: mean_a)(pop.x)


def _lookup(pop: DiscretePopulation, values_at_atoms: np.ndarray) -> GammaFn:
    """Turn per-atom values into a function on the support of ``X``."""
    ux, g = pop.x_groups()
    table = np.full(ux.shape[0], np.nan)
    ok = np.isfinite(values_at_atoms)
    table[g[ok]] = values_at_atoms[ok]

    def f(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.array([np.flatnonzero(np.all(ux == row, axis=1))[0] for row in x])
        return table[idx]
    return f


def debias_identity_check(fun: LinearFunctional, pop: DiscretePopulation, gamma: GammaFn,
                          alpha0: GammaFn, conditional: bool = False) -> float:
    """Residual of ``E[m(Z,g) - m(Z,g0)] = E[alpha0(X) J (g(X) - Y)]`` by enumeration.

    ``gamma_0`` is computed from ``pop`` itself. With ``conditional=True`` the
    identity is checked given ``X`` and the largest absolute residual over
    the support is returned.
    """
    data = pop.as_dataset()
    gamma0 = _lookup(pop, population_gamma0(fun, pop))
    J = fun.j(pop.a)
    lhs = fun.m(data, gamma) - fun.m(data, gamma0)
    rhs = np.asarray(alpha0(pop.x)) * J * (np.asarray(gamma(pop.x)) - pop.y)
    if conditional:
        return float(np.nanmax(np.abs(pop.conditional_mean(lhs - rhs))))
    return pop.expect(lhs) - pop.expect(rhs)


def linear_form_residual(fun: LinearFunctional, pop: DiscretePopulation, gamma: GammaFn,
                         alpha0: GammaFn) -> float:
    """``E[m(Z,g) - m(Z,0)] - E[alpha0(X) J g(X)]`` by enumeration."""
    data = pop.as_dataset()
    lhs = fun.m(data, gamma) - fun.m(data, zero_function)
    rhs = np.asarray(alpha0(pop.x)) * fun.j(pop.a) * np.asarray(gamma(pop.x))
    return pop.expect(lhs) - pop.expect(rhs)
