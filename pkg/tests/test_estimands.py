import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossfit_dr.data import Dataset, DiscretePopulation, ObservationZ
from crossfit_dr.estimands import (
    BUILTINS,
    COV,
    CTRL,
    TRT,
    _lookup,
    alpha_from_propensity,
    custom_functional,
    debias_identity_check,
    get_functional,
    j_indicator,
    linear_form_residual,
    m_eval,
    population_alpha0,
    population_gamma0,
    v_q_entrywise,
    v_q_eval,
)
from crossfit_dr.spline_basis import BasisSpec, SplineBasis


def random_population(rng, n_x=6, binary=True):
    x = rng.random((n_x, 1))
    a_vals = np.array([0.0, 1.0]) if binary else np.array([-0.5, 0.7])
    xs = np.repeat(x, 2, axis=0)
    a = np.tile(a_vals, n_x)
    y = rng.normal(size=2 * n_x)
    prob = rng.random(2 * n_x) + 0.05
    return DiscretePopulation(xs, a, y, prob / prob.sum())


class TestTable:
    def test_j_values(self):
        a = np.array([0.0, 1.0])
        assert COV.j(a).tolist() == [1.0, 1.0]
        assert TRT.j(a).tolist() == [0.0, 1.0]
        assert CTRL.j(a).tolist() == [1.0, 0.0]
        assert j_indicator(TRT, 1.0) == 1.0

    def test_m_values(self):
        z = ObservationZ(x=np.array([0.5]), a=1.0, y=3.0)
        g = lambda x: np.full(np.atleast_2d(x).shape[0], 2.0)
        assert m_eval(COV, z, g) == 1.0  # a (y - gamma)
        assert m_eval(TRT, z, g) == 2.0
        assert m_eval(CTRL, z, g) == 2.0

    def test_binary_validation(self):
        with pytest.raises(ValueError, match="binary"):
            TRT.j(np.array([0.0, 2.0]))
        COV.j(np.array([0.3, 2.0]))

    def test_registry(self):
        assert set(BUILTINS) == {"cov", "trt", "ctrl"}
        with pytest.raises(ValueError):
            get_functional("ate")
        with pytest.raises(ValueError):
            custom_functional("trt", lambda a: a, lambda x, a, y, g: g(x))

    def test_alpha_closed_forms(self):
        p = lambda x: np.array([0.25])
        assert alpha_from_propensity(COV, p)(None).tolist() == [-0.25]
        assert alpha_from_propensity(TRT, p)(None).tolist() == [4.0]
        assert np.isclose(alpha_from_propensity(CTRL, p)(None)[0], 4 / 3)


class TestVq:
    @pytest.mark.parametrize("fun", [COV, TRT, CTRL])
    def test_closed_form_matches_entrywise(self, fun, rng):
        b = SplineBasis(BasisSpec(2, 2, 1))
        n = 40
        d = Dataset(rng.random((n, 2)), (rng.random(n) < 0.5).astype(float), rng.normal(size=n))
        assert np.allclose(v_q_eval(fun, d, b), v_q_entrywise(fun, d, b), atol=1e-14)

    def test_single_observation_vector(self):
        b = SplineBasis(BasisSpec(1, 2, 0))
        z = ObservationZ(x=np.array([0.7]), a=1.0, y=0.0)
        assert v_q_eval(COV, z, b).tolist() == [0.0, -1.0]

    def test_custom_functional_uses_entrywise(self, rng):
        # weighted treated mean: m = w(x) gamma(x)
        fun = custom_functional("wtrt", lambda a: a, lambda x, a, y, g: x[:, 0] * g(x), binary_treatment=True)
        b = SplineBasis(BasisSpec(1, 2, 1))
        d = Dataset(rng.random((10, 1)), np.ones(10), rng.normal(size=10))
        want = b.evaluate(d.x) * d.x[:, [0]]
        assert np.allclose(v_q_eval(fun, d, b), want)


class TestPopulationIdentities:
    @given(st.integers(0, 2**32 - 1))
    def test_debias_identity_builtins(self, seed):
        rng = np.random.default_rng(seed)
        pop = random_population(rng)
        for fun in (COV, TRT, CTRL):
            alpha0 = _lookup(pop, population_alpha0(fun, pop))
            coef = rng.normal(size=3)
            gamma = lambda x, c=coef: c[0] + c[1] * x[:, 0] + c[2] * np.sin(5 * x[:, 0])
            assert abs(debias_identity_check(fun, pop, gamma, alpha0)) < 1e-12
            assert abs(linear_form_residual(fun, pop, gamma, alpha0)) < 1e-12

    def test_conditional_debias_cov(self, rng):
        pop = random_population(rng)
        alpha0 = _lookup(pop, population_alpha0(COV, pop))
        gamma = lambda x: np.cos(x[:, 0])
        assert debias_identity_check(COV, pop, gamma, alpha0, conditional=True) < 1e-12

    def test_wrong_representer_detected(self, rng):
        pop = random_population(rng)
        wrong = lambda x: np.ones(np.atleast_2d(x).shape[0])
        gamma = lambda x: 1.0 + x[:, 0]
        assert abs(debias_identity_check(TRT, pop, gamma, wrong)) > 1e-6

    def test_gamma0_is_conditional_mean(self):
        pop = DiscretePopulation(np.array([[0.1], [0.1], [0.6], [0.6]]), [0, 1, 0, 1], [1.0, 5.0, 2.0, 7.0],
                                 [0.1, 0.3, 0.4, 0.2])
        assert population_gamma0(TRT, pop).tolist() == [5.0, 5.0, 7.0, 7.0]
        eta = population_gamma0(COV, pop)
        assert np.allclose(eta[:2], (0.1 * 1 + 0.3 * 5) / 0.4)
