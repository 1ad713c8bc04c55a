import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossfit_dr.data import Dataset, DiscretePopulation
from crossfit_dr.estimands import COV, CTRL, TRT
from crossfit_dr.nuisance import (
    NuisanceWarning,
    SplitGrams,
    SplitTag,
    StabilityDiagnostics,
    diagnostics,
    fit_alpha,
    fit_gamma,
    population_gram,
    project_population,
    project_subpopulation,
)
from crossfit_dr.spline_basis import BasisSpec, GramMatrix, SingularGramError, SplineBasis, TransformedBasis


def sample_data(rng, n=300, d=1):
    x = rng.random((n, d))
    a = (rng.random(n) < 0.3 + 0.4 * x[:, 0]).astype(float)
    y = np.sin(3 * x[:, 0]) + a + rng.normal(size=n)
    return Dataset(x, a, y, (0,))


class TestFitGamma:
    def test_group_mean_oracle(self, rng):
        d = sample_data(rng)
        b = SplineBasis(BasisSpec(1, 4, 0))
        fit = fit_gamma(d, TRT, b)
        cells = b.cell_index(d.x)
        for c in range(4):
            mask = (cells == c) & (d.a == 1)
            assert np.isclose(fit.coefficients[c], d.y[mask].mean())

    def test_constant_outcome(self, rng):
        d = sample_data(rng)
        d = Dataset(d.x, d.a, np.full(len(d), 2.5))
        fit = fit_gamma(d, COV, SplineBasis(BasisSpec(1, 3, 2)))
        assert np.allclose(fit.predict(np.linspace(0, 1, 11)), 2.5)

    def test_only_treated_rows_matter(self, rng):
        d = sample_data(rng)
        y2 = np.where(d.a == 0, d.y + 100.0, d.y)
        b = SplineBasis(BasisSpec(1, 3, 1))
        a = fit_gamma(d, TRT, b).coefficients
        c = fit_gamma(Dataset(d.x, d.a, y2), TRT, b).coefficients
        assert np.allclose(a, c)

    def test_residual_orthogonality(self, rng):
        d = sample_data(rng, d=2)
        b = SplineBasis(BasisSpec(2, 2, 1))
        fit = fit_gamma(d, CTRL, b)
        p = b.evaluate(d.x) * CTRL.j(d.a)[:, None]
        resid = p.T @ (d.y - p @ fit.coefficients)
        assert np.max(np.abs(resid)) < 1e-8 * np.max(np.abs(p.T @ d.y))

    def test_all_j_zero_is_error(self, rng):
        d = sample_data(rng)
        d = Dataset(d.x, np.zeros(len(d)), d.y)
        with pytest.raises(ValueError, match="J=1"):
            fit_gamma(d, TRT, SplineBasis(BasisSpec(1, 2, 0)))

    def test_empty_cell_flagged(self):
        d = Dataset(np.array([[0.1], [0.2], [0.8]]), [1.0, 1.0, 0.0], [1.0, 2.0, 3.0])
        with pytest.warns(NuisanceWarning):
            fit = fit_gamma(d, TRT, SplineBasis(BasisSpec(1, 2, 0)))
        assert fit.flagged_cells == (1,)
        vals, flags = fit.predict_with_flags(np.array([[0.1], [0.9]]))
        assert np.allclose(vals, [1.5, 0.0])
        assert flags.tolist() == [False, True]


class TestFitAlpha:
    @given(st.integers(0, 2**32 - 1))
    def test_cov_equals_ols_of_minus_a(self, seed):
        rng = np.random.default_rng(seed)
        d = sample_data(rng, n=200, d=2)
        b = SplineBasis(BasisSpec(2, 2, 1))
        fit = fit_alpha(d, COV, b)
        ols = np.linalg.lstsq(b.evaluate(d.x), -d.a, rcond=None)[0]
        assert np.max(np.abs(fit.coefficients - ols)) < 1e-10

    def test_trt_single_cell_inverse_mean(self, rng):
        d = sample_data(rng)
        fit = fit_alpha(d, TRT, SplineBasis(BasisSpec(1, 1, 0)))
        assert np.isclose(fit.coefficients[0], len(d) / d.a.sum())

    def test_ctrl_mirrors_trt(self, rng):
        d = sample_data(rng)
        b = SplineBasis(BasisSpec(1, 3, 1))
        flipped = Dataset(d.x, 1.0 - d.a, d.y)
        assert np.allclose(fit_alpha(d, CTRL, b).coefficients, fit_alpha(flipped, TRT, b).coefficients)

    def test_split_tag_recorded(self, rng):
        d = sample_data(rng)
        fit = fit_alpha(d, COV, SplineBasis(BasisSpec(1, 2, 0)), SplitTag("alpha", 1))
        assert fit.split == SplitTag("alpha", 1)
        assert fit.kind == "alpha"


class TestReparameterization:
    @pytest.mark.parametrize("fun", [COV, TRT])
    def test_predictions_invariant(self, fun, rng):
        d = sample_data(rng, d=2)
        b = SplineBasis(BasisSpec(2, 2, 1))
        W = rng.normal(size=(b.size, b.size)) + 3 * np.eye(b.size)
        t = TransformedBasis(b, W)
        x = rng.random((50, 2))
        for fit in (fit_gamma, fit_alpha):
            p0 = fit(d, fun, b).predict(x)
            p1 = fit(d, fun, t).predict(x)
            assert np.max(np.abs(p0 - p1)) <= 1e-6 * max(1.0, np.max(np.abs(p0)))


def discrete_population(rng, n_x=6):
    x = np.repeat(rng.random((n_x, 1)), 2, axis=0)
    a = np.tile([0.0, 1.0], n_x)
    y = rng.normal(size=2 * n_x)
    p = rng.random(2 * n_x) + 0.1
    return DiscretePopulation(x, a, y, p / p.sum())


class TestProjection:
    @given(st.integers(0, 2**32 - 1))
    def test_subpopulation_equals_full(self, seed):
        rng = np.random.default_rng(seed)
        pop = discrete_population(rng, 8)
        b = SplineBasis(BasisSpec(1, 2, 1))
        f = lambda x: np.exp(x[:, 0])
        for fun in (COV, TRT, CTRL):
            try:
                full = project_population(f, fun, b, pop, check=False)
            except SingularGramError:
                continue
            sub = project_subpopulation(f, fun, b, pop)
            assert np.max(np.abs(full - sub)) < 1e-10

    def test_idempotent_in_span(self, rng):
        pop = discrete_population(rng, 12)
        b = SplineBasis(BasisSpec(1, 2, 1))
        coef = rng.normal(size=b.size)
        f = lambda x: b.evaluate(x) @ coef
        got = project_population(f, COV, b, pop)
        assert np.max(np.abs(b.evaluate(pop.x) @ got - f(pop.x))) < 1e-10

    def test_singular_population(self):
        pop = DiscretePopulation(np.array([[0.1], [0.1]]), [0.0, 1.0], [0.0, 1.0], [0.5, 0.5])
        with pytest.raises(SingularGramError):
            project_population(lambda x: x[:, 0], COV, SplineBasis(BasisSpec(1, 2, 0)), pop)

    def test_sup_error_shrinks(self):
        from crossfit_dr.simlab.dgp import Constant, DGPSpec, quadrature_population
        f = lambda x: np.abs(x[:, 0] - 0.37) ** 1.5  # Hölder order 1.5
        errs, ks = [], []
        for seg in (4, 8, 16, 32):
            dgp = DGPSpec(1, (0,), Constant(0.5), f, Constant(0.0))
            pop = quadrature_population(dgp, seg, 4)
            b = SplineBasis(BasisSpec(1, seg, 1))
            coef = project_population(f, COV, b, pop, check=False)
            grid = np.linspace(0, 1, 2001)[:, None]
            errs.append(np.max(np.abs(b.evaluate(grid) @ coef - f(grid))))
            ks.append(b.size)
        slope = np.polyfit(np.log(ks), np.log(errs), 1)[0]
        assert abs(slope - (-1.5)) < 0.2


class TestDiagnostics:
    def test_identity_all_true(self):
        I = GramMatrix(dense_matrix=np.eye(3))
        b = SplineBasis(BasisSpec(1, 3, 0))
        W = b.whiten(I)
        out = diagnostics(SplitGrams(I, I, I, I, I), W, W)
        assert out.indicator_hat and out.indicator_tilde and out.indicator_bar

    def test_rank_deficient_hat_false(self, rng):
        b = SplineBasis(BasisSpec(1, 4, 1))
        ref = b.design(rng.random((1000, 1))).gram()
        small = b.design(rng.random((5, 1))).gram()
        out = diagnostics(SplitGrams(small, ref), b.whiten(ref))
        assert not out.indicator_hat
        assert out.lambda_min_hat < 1e-8

    def test_thresholds(self):
        d = StabilityDiagnostics(0.5, 0.49, 1.5, 0.5, True)
        assert d.indicator_hat and not d.indicator_tilde and d.indicator_bar
        assert not StabilityDiagnostics(1, 1, 1.51, 1, True).indicator_bar
        assert not StabilityDiagnostics(1, 1, 1, 1, False).indicator_bar

    def test_population_gram_weighted(self):
        pop = DiscretePopulation(np.array([[0.2], [0.7], [0.7]]), [1.0, 0.0, 1.0], [0, 0, 0], [0.5, 0.25, 0.25])
        G = population_gram(TRT, SplineBasis(BasisSpec(1, 2, 0)), pop)
        assert np.allclose(np.diag(G.matrix), [0.5, 0.25])
