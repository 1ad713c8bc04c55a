"""Monte Carlo experiments: bias decomposition, rate curves and mean-zero diagnostics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.stats

from ..crossfit import CrossFitScheme, run
from ..estimands import get_functional, v_q_eval
from ..nuisance import population_gram, project_population
from ..second_stage import oracle_theta, weights
from ..spline_basis import BasisSpec, SplineBasis
from .dgp import DGPSpec, quadrature_population, sample, true_theta

CSV_COLUMNS = ("scheme", "estimand", "n", "k_n", "r_n", "target_id", "bias", "sd", "rmse", "se_bias", "reps")


def map_reps(fn, reps: int, threads: int = 1) -> list:
    """``[fn(0), ..., fn(reps-1)]``; results are ordered by replication index."""
    if threads <= 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(reps)))


@dataclass
class MCRow:
    scheme: str
    estimand: str
    n: int
    k_n: int
    r_n: int
    target_id: int
    bias: float
    sd: float
    rmse: float
    se_bias: float
    reps: int


@dataclass
class SlopeFit:
    """Least-squares slope of ``log rmse`` on ``log n`` with a 95% t interval."""

    scheme: str
    slope: float
    stderr: float
    ci_low: float
    ci_high: float
    predicted: float | None = None


@dataclass
class MCReport:
    """Monte Carlo summaries per (scheme, n, target).

    ``sd`` uses ``ddof=0`` so that ``rmse**2 == bias**2 + sd**2``.
    """

    rows: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, scheme, estimand, n, k_n, r_n, estimates: np.ndarray, truth: np.ndarray) -> None:
        est = np.atleast_2d(np.asarray(estimates, dtype=float))
        if est.shape[0] == 1 and np.ndim(estimates) == 1:
            est = est.T
        err = est - np.asarray(truth, dtype=float)[None, :]
        reps = err.shape[0]
        bias = err.mean(axis=0)
        sd = err.std(axis=0, ddof=0)
        rmse = np.sqrt(np.mean(err ** 2, axis=0))
        for t in range(err.shape[1]):
            self.rows.append(MCRow(scheme, estimand, int(n), int(k_n), int(r_n), t, float(bias[t]),
                                   float(sd[t]), float(rmse[t]), float(sd[t] / math.sqrt(reps)), reps))

    def select(self, scheme: str | None = None, n: int | None = None, k_n: int | None = None) -> list:
        return [r for r in self.rows if (scheme is None or r.scheme == scheme)
                and (n is None or r.n == n) and (k_n is None or r.k_n == k_n)]

    def aggregate_rmse(self, scheme: str, n: int) -> float:
        """``sqrt`` of the target-averaged mean squared error."""
        rows = self.select(scheme, n)
        return float(np.sqrt(np.mean([r.rmse ** 2 for r in rows])))

    def slope(self, scheme: str) -> SlopeFit:
        for s in self.slopes:
            if s.scheme == scheme:
                return s
        raise KeyError(scheme)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "slopes": [asdict(s) for s in self.slopes],
                "diagnostics": self.diagnostics, "config": self.config}


def fit_slope(n_grid, rmse, scheme: str = "", predicted: float | None = None) -> SlopeFit:
    """Log-log slope with a t-based 95% confidence interval."""
    n_grid = np.asarray(n_grid, dtype=float)
    if n_grid.size < 3:
        raise ValueError("rate fits need at least 3 grid points")
    res = scipy.stats.linregress(np.log(n_grid), np.log(np.asarray(rmse, dtype=float)))
    q = scipy.stats.t.ppf(0.975, n_grid.size - 2)
    return SlopeFit(scheme, float(res.slope), float(res.stderr),
                    float(res.slope - q * res.stderr), float(res.slope + q * res.stderr), predicted)


# ---------------------------------------------------------------------------
# bias decomposition for the marginal covariance
# ---------------------------------------------------------------------------

_ROWS_PER_FOLD = {"none": 1, "two_way": 2, "three_way": 3}


def _check_well_specified(dgp: DGPSpec, basis: SplineBasis) -> None:
    pop = quadrature_population(dgp, basis.spec.segments_per_dim, 2, order=4)
    cov = get_functional("cov")
    for label, fn in (("E[Y|X]", dgp.eta0), ("E[A|X]", dgp.pi0)):
        coef = project_population(fn, cov, basis, pop, check=False)
        err = np.max(np.abs(basis.design(pop.x).predict(coef) - fn(pop.x)))
        if err > 1e-9:
            raise ValueError(
                f"{label} is not in the span of the q basis (sup error {err:.2e}); the bias "
                "decomposition needs a well-specified design")
    cc = dgp.conditional_cov(pop.x)
    if np.ptp(cc) > 1e-12:
        raise ValueError("the bias decomposition needs a constant conditional covariance")


def hat_trace_bias(data, basis: SplineBasis, cov: float) -> float:
    """``-cov * tr(H) / n`` from the hat matrix of the dense design."""
    Q = basis.design(data.x).dense()
    n = Q.shape[0]
    H = Q @ np.linalg.pinv(Q)
    return -cov * float(np.trace(H)) / n


def bias_decomposition_cov(dgp: DGPSpec, n: int = 400, k_grid=(16, 32),
                           schemes=("none", "two_way", "three_way"), reps: int = 2000,
                           seed: int = 0, degree: int = 0, threads: int = 1) -> dict:
    """Monte Carlo bias of the residual-product covariance estimator per scheme.

    ``n`` is the per-fold size: 2-way draws ``2n`` rows and 3-way ``3n``.
    The ``predicted`` column is ``-c k/n`` without cross-fitting, ``+c k/n``
    (leading order) for 2-way and 0 for 3-way; ``hat_trace`` averages the
    exact conditional bias ``-c tr(H)/n`` over the no-cross-fitting draws.
    """
    if dgp.c_idx:
        raise ValueError("the bias decomposition is for the marginal estimand (no C)")
    cov = float(dgp.conditional_cov(np.zeros((1, dgp.d_x)))[0])
    truth = true_theta(dgp, "cov")
    table = []
    for k in k_grid:
        m = math.comb(dgp.d_x + degree, degree)
        segments = max(1, round((k / m) ** (1.0 / dgp.d_x)))
        q_spec = BasisSpec(dgp.d_x, segments, degree)
        basis = SplineBasis(q_spec)
        if basis.size != k:
            raise ValueError(f"k_n={k} is not attainable with degree {degree} in {dgp.d_x} dimension(s)")
        if k >= n:
            raise ValueError(f"k_n={k} >= n={n} violates limited basis growth")
        _check_well_specified(dgp, basis)
        b_spec = BasisSpec(1, 1, 0)
        for scheme_name in schemes:
            scheme_kind = CrossFitScheme(scheme_name).kind
            n_rows = n * _ROWS_PER_FOLD[scheme_kind]

            def one(r, scheme_kind=scheme_kind, n_rows=n_rows):
                data = sample(dgp, n_rows, seed, r)
                est = run(data, "cov", basis, b_spec, CrossFitScheme(scheme_kind, seed=seed + r), [0.0])
                h = hat_trace_bias(data, basis, cov) if scheme_kind == "none" else float("nan")
                return float(est.theta[0]), h

            out = map_reps(one, reps, threads)
            est = np.array([o[0] for o in out])
            hat = np.array([o[1] for o in out])
            err = est - truth
            predicted = {"none": -cov * k / n, "two_way": cov * k / n, "three_way": 0.0}[scheme_kind]
            table.append({
                "scheme": scheme_kind, "n": n, "k_n": k, "reps": reps,
                "bias": float(err.mean()), "se_bias": float(err.std(ddof=0) / math.sqrt(reps)),
                "sd": float(err.std(ddof=0)), "rmse": float(np.sqrt(np.mean(err ** 2))),
                "predicted": predicted,
                "hat_trace": float(hat.mean()) if scheme_kind == "none" else float("nan"),
                "cov": cov,
            })
    return {"rows": table, "truth": truth}


# ---------------------------------------------------------------------------
# rate curves
# ---------------------------------------------------------------------------

def cube_root_rule(scale: float = 1.0, minimum: int = 1):
    """``n -> max(minimum, round(scale * n^(1/3)))`` segments."""
    return lambda n: max(minimum, int(round(scale * n ** (1.0 / 3.0))))


def rate_experiment(dgp: DGPSpec, fun: str, n_grid, q_rule, b_rule, schemes=("oracle", "three_way", "two_way"),
                    reps: int = 200, targets=None, seed: int = 0, q_degree: int = 1, b_degree: int = 1,
                    threads: int = 1, predicted: float | None = None) -> MCReport:
    """RMSE curves over ``n`` and their log-log slopes.

    ``n`` is the evaluation-fold size. Segment rules map ``n`` to the number
    of segments per axis of the ``q`` and ``b`` bases. When a cross-fitting
    scheme runs, ``oracle`` is the oracle on the 3-way (else 2-way)
    evaluation folds, averaged over rotations; alone, it uses ``n`` fresh rows.
    """
    n_grid = [int(v) for v in n_grid]
    if len(n_grid) < 3:
        raise ValueError("rate_experiment needs at least 3 grid points")
    if targets is None:
        targets = np.linspace(0.025, 0.975, 20)
    targets = np.asarray(targets, dtype=float).reshape(-1, len(dgp.c_idx) or 1)
    truth = true_theta(dgp, fun, targets) if dgp.c_idx else np.full(1, true_theta(dgp, fun))
    d_c = max(1, len(dgp.c_idx))
    report = MCReport(config={"dgp": dgp.name, "fun": fun, "n_grid": n_grid, "reps": reps, "seed": seed,
                              "q_degree": q_degree, "b_degree": b_degree})
    cf = [s for s in schemes if s != "oracle"]
    for n in n_grid:
        q_spec = BasisSpec(dgp.d_x, q_rule(n), q_degree)
        b_spec = BasisSpec(d_c, b_rule(n), b_degree) if dgp.c_idx else BasisSpec(1, 1, 0)
        k_n, r_n = q_spec.size, b_spec.size
        if max(k_n, r_n) >= n:
            raise ValueError(f"basis size (k_n={k_n}, r_n={r_n}) >= n={n}: limited basis growth violated")
        q_basis, b_basis = SplineBasis(q_spec), SplineBasis(b_spec)

        def one(r, n=n):
            out = {}
            for s in cf:
                kind = CrossFitScheme(s).kind
                data = sample(dgp, n * _ROWS_PER_FOLD[kind], seed, r)
                est = run(data, fun, q_basis, b_basis, CrossFitScheme(kind, seed=seed + r), targets,
                          truth=dgp if "oracle" in schemes else None)
                out[kind] = est.theta
                if est.oracle is not None and ("oracle" not in out or kind == "three_way"):
                    out["oracle"] = est.oracle
            if "oracle" in schemes and not cf:
                data = sample(dgp, n, seed, r)
                out["oracle"] = _oracle(dgp, fun, b_basis, data, targets)
            return out

        results = map_reps(one, reps, threads)
        for s in (["oracle"] if "oracle" in schemes else []) + [CrossFitScheme(s).kind for s in cf]:
            report.add(s, fun, n, k_n, r_n, np.array([res[s] for res in results]), truth)
    for s in (["oracle"] if "oracle" in schemes else []) + [CrossFitScheme(s).kind for s in cf]:
        rm = [report.aggregate_rmse(s, n) for n in n_grid]
        report.slopes.append(fit_slope(n_grid, rm, s, predicted))
    return report


def _oracle(dgp: DGPSpec, fun: str, b_basis, data, targets) -> np.ndarray:
    if fun == "cate":
        trt, ctrl = get_functional("trt"), get_functional("ctrl")
        return (oracle_theta(dgp.gamma0(trt), dgp.alpha0(trt), trt, b_basis, data, targets)
                - oracle_theta(dgp.gamma0(ctrl), dgp.alpha0(ctrl), ctrl, b_basis, data, targets))
    f = get_functional(fun)
    return oracle_theta(dgp.gamma0(f), dgp.alpha0(f), f, b_basis, data, targets)


# ---------------------------------------------------------------------------
# mean-zero diagnostics
# ---------------------------------------------------------------------------

H_NAMES = ("p(Y-gamma0)", "v_q-p*alpha0", "p(gamma0-gamma*)", "p(alpha0-alpha*)")


@dataclass
class DiagnosticsSample:
    """Pooled Monte Carlo means and SEs of the mean-zero quantities.

    ``h_means[name]`` and ``h_ses[name]`` have one entry per basis function;
    ``indicator_freq`` maps ``n`` to the frequency of ``lambda_min >= 1/2``.
    """

    h_means: dict
    h_ses: dict
    indicator_freq: dict
    reproducing_residual: float
    n: int
    k_n: int
    reps: int

    def max_abs_z(self) -> float:
        z = [np.abs(self.h_means[k]) / np.where(self.h_ses[k] > 0, self.h_ses[k], np.inf) for k in self.h_means]
        return float(max(np.max(v) for v in z)) if z else 0.0

    def to_dict(self) -> dict:
        return {"h_means": {k: v.tolist() for k, v in self.h_means.items()},
                "h_ses": {k: v.tolist() for k, v in self.h_ses.items()},
                "indicator_freq": {str(k): v for k, v in self.indicator_freq.items()},
                "reproducing_residual": self.reproducing_residual,
                "n": self.n, "k_n": self.k_n, "reps": self.reps, "max_abs_z": self.max_abs_z()}


def h_quantities(dgp: DGPSpec, fun, basis, data, gamma_star, alpha_star) -> np.ndarray:
    """Per-sample means of the four quantities, shape ``(4, k)``."""
    f = get_functional(fun) if isinstance(fun, str) else fun
    g0, a0 = dgp.gamma0(f), dgp.alpha0(f)
    design = basis.design(data.x)
    J = f.j(data.a)
    n = len(data)
    x = data.x
    out = np.empty((4, basis.size))
    out[0] = design.moment(J * (data.y - g0(x))) / n
    out[1] = v_q_eval(f, data, basis).mean(axis=0) - design.moment(J * a0(x)) / n
    out[2] = design.moment(J * (g0(x) - gamma_star(x))) / n
    out[3] = design.moment(J * (a0(x) - alpha_star(x))) / n
    return out


def indicator_frequency(dgp: DGPSpec, fun, q_spec: BasisSpec, n_grid, reps: int, seed: int = 0,
                        panels: int = 4, threads: int = 1) -> dict:
    """Frequency of ``lambda_min(whitened Sigma_hat) >= 1/2`` per ``n``.

    Whitening uses the population Gram computed by quadrature with
    ``panels`` Gauss-Legendre panels per basis segment.
    """
    f = get_functional(fun) if isinstance(fun, str) else fun
    basis = SplineBasis(q_spec)
    pop = quadrature_population(dgp, q_spec.segments_per_dim, panels)
    W = basis.whiten(population_gram(f, basis, pop))
    out = {}
    for n in n_grid:
        def one(r, n=n):
            data = sample(dgp, n, seed, r)
            G = basis.design(data.x).gram(f.j(data.a))
            return W.apply(G).lambda_min >= 0.5
        out[int(n)] = float(np.mean(map_reps(one, reps, threads)))
    return out


def reproducing_residual(dgp: DGPSpec, b_spec: BasisSpec, n: int, instances: int, seed: int = 0) -> float:
    """Largest ``|(1/n) sum w(C_i) g(C_i) - g(c)|`` for random polynomials ``g``."""
    basis = SplineBasis(b_spec)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xB0B])))
    worst = 0.0
    for r in range(instances):
        c = sample(dgp, n, seed, r).c
        coef = rng.normal(size=len(basis.exponents))

        def g(pts):
            return sum(cj * np.prod(pts ** e, axis=1) for cj, e in zip(coef, basis.exponents))

        target = rng.random((1, b_spec.dim))
        w = weights(basis, c, target)
        worst = max(worst, abs(float(np.mean(w * g(c))) - float(g(target)[0])))
    return worst


def mean_zero_diagnostics(dgp: DGPSpec, fun="trt", n: int = 5000, q_spec: BasisSpec | None = None,
                      reps: int = 200, seed: int = 0, indicator_spec: BasisSpec | None = None,
                      indicator_n=(100, 400, 1600), indicator_reps: int = 500, panels: int = 4,
                      threads: int = 1) -> DiagnosticsSample:
    """Mean-zero checks, indicator frequencies and the reproducing residual."""
    f = get_functional(fun) if isinstance(fun, str) else fun
    if q_spec is None:
        q_spec = BasisSpec(dgp.d_x, 3, 1) if dgp.d_x == 2 else BasisSpec(dgp.d_x, 4, 1)
    basis = SplineBasis(q_spec)
    pop = quadrature_population(dgp, q_spec.segments_per_dim, panels)
    cg = project_population(dgp.gamma0(f), f, basis, pop)
    ca = project_population(dgp.alpha0(f), f, basis, pop)

    def gamma_star(x):
        return basis.design(x).predict(cg)

    def alpha_star(x):
        return basis.design(x).predict(ca)

    per = np.array(map_reps(lambda r: h_quantities(dgp, f, basis, sample(dgp, n, seed, r), gamma_star, alpha_star),
                            reps, threads))
    means = per.mean(axis=0)
    ses = per.std(axis=0, ddof=1) / math.sqrt(reps)
    if indicator_spec is None:
        indicator_spec = BasisSpec(dgp.d_x, 4 if dgp.d_x == 1 else 2, 1)
    freq = indicator_frequency(dgp, f, indicator_spec, indicator_n, indicator_reps, seed, panels, threads)
    b_spec = BasisSpec(max(1, len(dgp.c_idx)), 4, 1)
    resid = reproducing_residual(dgp, b_spec, 500, 20, seed) if dgp.c_idx else 0.0
    return DiagnosticsSample({k: means[i] for i, k in enumerate(H_NAMES)},
                             {k: ses[i] for i, k in enumerate(H_NAMES)},
                             freq, resid, n, basis.size, reps)


def simulate(dgp: DGPSpec, fun: str, n: int, q_spec: BasisSpec, b_spec: BasisSpec, scheme: str = "three_way",
             reps: int = 200, targets=None, seed: int = 0, iterations: int | None = None,
             threads: int = 1) -> MCReport:
    """Monte Carlo bias, SD and RMSE at a single ``n`` (per evaluation fold)."""
    kind = CrossFitScheme(scheme).kind
    if targets is None:
        targets = np.linspace(0.1, 0.9, 5)
    targets = np.asarray(targets, dtype=float).reshape(-1, len(dgp.c_idx) or 1)
    truth = true_theta(dgp, fun, targets) if dgp.c_idx else np.full(targets.shape[0], true_theta(dgp, fun))
    if not dgp.c_idx:
        b_spec = BasisSpec(1, 1, 0)
    if max(q_spec.size, b_spec.size) >= n:
        raise ValueError(f"basis size (k_n={q_spec.size}, r_n={b_spec.size}) >= n={n}: "
                         "limited basis growth violated")
    q_basis, b_basis = SplineBasis(q_spec), SplineBasis(b_spec)

    def one(r):
        data = sample(dgp, n * _ROWS_PER_FOLD[kind], seed, r)
        est = run(data, fun, q_basis, b_basis, CrossFitScheme(kind, iterations, seed=seed + r), targets, truth=dgp)
        return est.theta, est.oracle

    out = map_reps(one, reps, threads)
    report = MCReport(config={"dgp": dgp.name, "fun": fun, "n": n, "scheme": kind, "reps": reps, "seed": seed})
    report.add(kind, fun, n, q_spec.size, b_spec.size, np.array([o[0] for o in out]), truth)
    report.add("oracle", fun, n, q_spec.size, b_spec.size, np.array([o[1] for o in out]), truth)
    return report
