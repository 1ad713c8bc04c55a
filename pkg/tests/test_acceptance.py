"""Acceptance criteria, each printed as one PASS/FAIL line.

Monte Carlo criteria use the full replication counts and fixed seeds.
"""

import time

import numpy as np
import pytest

from crossfit_dr.crossfit import CrossFitScheme, run
from crossfit_dr.data import Dataset, DiscretePopulation
from crossfit_dr.estimands import COV, CTRL, TRT, _lookup, debias_identity_check, population_alpha0
from crossfit_dr.nuisance import fit_alpha, project_population, project_subpopulation
from crossfit_dr.second_stage import weights
from crossfit_dr.simlab import (
    piecewise_cov_dgp,
    bias_decomposition_cov,
    cate_dgp,
    cube_root_rule,
    mean_zero_diagnostics,
    rate_dgp,
    rate_experiment,
    sample,
    smooth_dgp,
)
from crossfit_dr.simlab.experiments import indicator_frequency
from crossfit_dr.spline_basis import BasisSpec, SplineBasis, TransformedBasis

RESULT_LINES = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULT_LINES.append(line)
    print(line)
    assert ok, line


def _row(rows, scheme, k):
    return next(r for r in rows if r["scheme"] == scheme and r["k_n"] == k)


@pytest.mark.slow
def test_criterion_01_no_crossfit_bias():
    t0 = time.perf_counter()
    out = bias_decomposition_cov(piecewise_cov_dgp(), n=400, k_grid=(16, 32), schemes=("none",),
                                 reps=2000, seed=101)
    elapsed = time.perf_counter() - t0
    parts, ok = [], elapsed < 120
    for k in (16, 32):
        r = _row(out["rows"], "none", k)
        want = -0.25 * k / 400
        # independent oracle: exact hat-matrix trace averaged over the same draws
        ok &= abs(r["bias"] - want) < 4 * r["se_bias"] and abs(r["hat_trace"] - want) < 1e-12
        parts.append(f"k={k} bias={r['bias']:.5f} (target {want:.3f}, se {r['se_bias']:.5f}, "
                     f"hat trace {r['hat_trace']:.5f})")
    report(1, ok, "; ".join(parts) + f"; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_02_two_way_vs_three_way():
    t0 = time.perf_counter()
    out = bias_decomposition_cov(piecewise_cov_dgp(), n=400, k_grid=(16,), schemes=("two_way", "three_way"),
                                 reps=2000, seed=202)
    elapsed = time.perf_counter() - t0
    scale = 0.25 * 16 / 400
    two, three = _row(out["rows"], "two_way", 16), _row(out["rows"], "three_way", 16)
    ratio = abs(two["bias"]) / scale
    ok = 0.5 <= ratio <= 3.0 and abs(three["bias"]) < 4 * three["se_bias"] and elapsed < 300
    report(2, ok, f"2-way |bias|/(c k/n)={ratio:.2f}; 3-way bias={three['bias']:.5f} "
                  f"(se {three['se_bias']:.5f}); {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_03_oracle_rate():
    t0 = time.perf_counter()
    rep = rate_experiment(rate_dgp(), "trt", [500, 1000, 2000, 4000, 8000], cube_root_rule(1.0, 2),
                          cube_root_rule(0.5, 1), schemes=("oracle",), reps=500, seed=303)
    elapsed = time.perf_counter() - t0
    slope = rep.slope("oracle").slope
    ok = abs(slope + 1 / 3) <= 0.15 and elapsed < 600
    report(3, ok, f"oracle log-log slope {slope:.3f} (target -0.333 +- 0.15); {elapsed:.0f}s")


def test_criterion_04_reproducing_property():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        dim = int(rng.integers(1, 3))
        spec = BasisSpec(dim, int(rng.integers(1, 5)), int(rng.integers(0, 4)))
        basis = SplineBasis(spec)
        c = rng.random((max(400, 30 * basis.size), dim))
        target = rng.random((1, dim))
        coef = rng.normal(size=len(basis.exponents))

        def g(pts):
            return sum(cj * np.prod(pts ** e, axis=1) for cj, e in zip(coef, basis.exponents))

        w = weights(basis, c, target)
        worst = max(worst, abs(float(np.mean(w * g(c))) - float(g(target)[0])))
    report(4, worst < 1e-8, f"max |mean(w g) - g(c)| = {worst:.2e} over 100 instances (tol 1e-8)")


def test_criterion_05_moment_estimator_equals_ols():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(50):
        dim = int(rng.integers(1, 3))
        basis = SplineBasis(BasisSpec(dim, int(rng.integers(1, 4)), int(rng.integers(0, 3))))
        n = 20 * basis.size + 50
        x = rng.random((n, dim))
        a = rng.normal(size=n) if rng.random() < 0.5 else (rng.random(n) < 0.5).astype(float)
        d = Dataset(x, a, rng.normal(size=n), ())
        ols = np.linalg.lstsq(basis.evaluate(x), -a, rcond=None)[0]
        worst = max(worst, float(np.max(np.abs(fit_alpha(d, COV, basis).coefficients - ols))))
    report(5, worst < 1e-10, f"max |alpha coef - OLS(-A)| = {worst:.2e} over 50 instances (tol 1e-10)")


def _random_population(rng, n_x=16):
    x = np.repeat(((np.arange(n_x) + rng.random(n_x)) / n_x)[:, None], 2, axis=0)
    a = np.tile([0.0, 1.0], n_x)
    p = rng.random(2 * n_x) + 0.05
    return DiscretePopulation(x, a, rng.normal(size=2 * n_x), p / p.sum())


def test_criterion_06_projection_equivalence():
    rng = np.random.default_rng(606)
    basis = SplineBasis(BasisSpec(1, 3, 1))
    worst = 0.0
    for _ in range(20):
        pop = _random_population(rng)
        coef = rng.normal(size=3)
        f = lambda x, c=coef: c[0] * np.sin(4 * x[:, 0]) + c[1] * x[:, 0] ** 3 + c[2]
        for fun in (COV, TRT, CTRL):
            full = project_population(f, fun, basis, pop, check=False)
            sub = project_subpopulation(f, fun, basis, pop)
            worst = max(worst, float(np.max(np.abs(full - sub))))
    report(6, worst < 1e-10, f"max coefficient gap {worst:.2e} over 20 populations x 3 estimands (tol 1e-10)")


def test_criterion_07_debias_identity():
    rng = np.random.default_rng(707)
    worst = 0.0
    for fun in (COV, TRT, CTRL):
        pop = _random_population(rng, 10)
        alpha0 = _lookup(pop, population_alpha0(fun, pop))
        for _ in range(20):
            c = rng.normal(size=4)
            gamma = lambda x, c=c: c[0] + c[1] * x[:, 0] + c[2] * np.cos(7 * x[:, 0]) + c[3] * x[:, 0] ** 2
            worst = max(worst, abs(debias_identity_check(fun, pop, gamma, alpha0)))
    report(7, worst < 1e-12, f"max residual {worst:.2e} over 3 estimands x 20 gamma (tol 1e-12)")


@pytest.mark.slow
def test_criterion_08_mean_zero_quantities():
    parts, ok = [], True
    for fun in ("trt", "cov"):
        ds = mean_zero_diagnostics(smooth_dgp(2), fun, n=5000, q_spec=BasisSpec(2, 3, 1), reps=200, seed=808,
                               indicator_n=(100,), indicator_reps=1)
        z = ds.max_abs_z()
        ok &= ds.k_n == 27 and z < 4
        parts.append(f"{fun} max|z|={z:.2f}")
    report(8, ok, ", ".join(parts) + " over 4 quantities x 27 coordinates (bound 4)")


def test_criterion_09_indicator_stability():
    freq = indicator_frequency(rate_dgp(), "cov", BasisSpec(1, 4, 1), (100, 400, 1600), reps=500, seed=909)
    vals = [freq[n] for n in (100, 400, 1600)]
    ok = vals[0] <= vals[1] <= vals[2] and vals[2] >= 0.95
    report(9, ok, f"frequency at k_n=8: n=100 {vals[0]:.3f}, n=400 {vals[1]:.3f}, n=1600 {vals[2]:.3f}")


@pytest.mark.slow
def test_criterion_10_cate_composition():
    n_grid = [250, 500, 1000, 2000, 4000]
    rep = rate_experiment(cate_dgp(0.1), "cate", n_grid, lambda n: max(1, round(n ** 0.25 / 2)),
                          cube_root_rule(0.5, 1), schemes=("oracle", "three_way"), reps=300,
                          targets=np.linspace(0.05, 0.95, 10), seed=1010)
    cf = [rep.aggregate_rmse("three_way", n) for n in n_grid]
    orc = [rep.aggregate_rmse("oracle", n) for n in n_grid]
    ok = all(b < a for a, b in zip(cf, cf[1:])) and cf[-1] <= 2 * orc[-1]
    report(10, ok, "3-way RMSE " + ", ".join(f"{v:.3f}" for v in cf)
           + f"; ratio to oracle at n={n_grid[-1]}: {cf[-1] / orc[-1]:.2f} (bound 2)")


def test_criterion_11_basis_transform_invariance():
    rng = np.random.default_rng(1111)
    dgp = smooth_dgp(2)
    worst = 0.0
    for i in range(20):
        data = sample(dgp, 900, seed=1111, rep=i)
        base = SplineBasis(BasisSpec(2, 2, 1))
        W = rng.normal(size=(base.size, base.size))
        W += np.eye(base.size) * (1.0 + np.abs(np.linalg.eigvals(W)).max())
        targets = rng.random((3, 1))
        fun = ("cov", "trt", "ctrl")[i % 3]
        scheme = CrossFitScheme("three_way", seed=i)
        a = run(data, fun, base, BasisSpec(1, 2, 1), scheme, targets).theta
        b = run(data, fun, TransformedBasis(base, W), BasisSpec(1, 2, 1), scheme, targets).theta
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12))))
    report(11, worst < 1e-6, f"max relative theta gap {worst:.2e} over 20 instances (tol 1e-6)")
