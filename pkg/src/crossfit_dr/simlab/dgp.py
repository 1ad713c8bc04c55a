"""Data-generating processes with known nuisances and ground-truth functionals.

Outcomes follow ``Y = mu(A, X) + noise`` with ``mu(a, x) = base(x) + a tau(x)``
and ``X ~ Uniform[0, 1]^d``. Treatment is Bernoulli with propensity ``pi(x)``
or continuous, ``A = pi(x) + U(-h, h)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..data import Dataset, DiscretePopulation
from ..estimands import LinearFunctional, get_functional

SAMPLE_STREAM = 0x5A3D


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else np.atleast_2d(x)


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, x) -> np.ndarray:
        return np.full(_points(x).shape[0], float(self.value))


@dataclass(frozen=True)
class CosineSeries:
    """``offset + sum_k coef_k prod_j cos(pi k_j x_j)`` over selected coordinates.

    Coefficients decaying like ``|k|^{-(s+1)}`` give a function whose
    smoothness is roughly ``s``; :meth:`with_order` builds such a series.
    """

    frequencies: tuple[tuple[int, ...], ...]
    coefficients: tuple[float, ...]
    offset: float = 0.0
    coords: tuple[int, ...] = (0,)

    @classmethod
    def with_order(cls, order: float, n_terms: int = 8, amplitude: float = 1.0,
                   offset: float = 0.0, coords=(0,), seed: int = 0) -> "CosineSeries":
        """Random signs, magnitudes ``amplitude * |k|^{-(order+1)}`` for ``|k| <= n_terms``."""
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xC05])))
        freqs, coefs = [], []
        for k in itertools.product(range(n_terms + 1), repeat=len(coords)):
            norm = sum(k)
            if norm == 0 or norm > n_terms:
                continue
            freqs.append(tuple(k))
            coefs.append(float(rng.choice((-1.0, 1.0)) * amplitude * norm ** (-(order + 1.0))))
        return cls(tuple(freqs), tuple(coefs), offset, tuple(coords))

    def __call__(self, x) -> np.ndarray:
        x = _points(x)[:, list(self.coords)]
        out = np.full(x.shape[0], float(self.offset))
        for k, c in zip(self.frequencies, self.coefficients):
            out += c * np.prod(np.cos(np.pi * np.asarray(k) * x), axis=1)
        return out

    def bound(self) -> float:
        """Upper bound on ``sup |f - offset|``."""
        return float(np.sum(np.abs(self.coefficients)))


@dataclass(frozen=True)
class PiecewiseConstant:
    """Constant on the cells of an equal ``segments^len(coords)`` grid (C order)."""

    values: tuple[float, ...]
    segments: int
    coords: tuple[int, ...] = (0,)

    def __post_init__(self):
        if len(self.values) != self.segments ** len(self.coords):
            raise ValueError("need one value per grid cell")

    def __call__(self, x) -> np.ndarray:
        x = _points(x)[:, list(self.coords)]
        idx = np.minimum(np.floor(x * self.segments).astype(np.int64), self.segments - 1)
        idx = np.clip(idx, 0, self.segments - 1)
        cell = np.ravel_multi_index(tuple(idx.T), (self.segments,) * len(self.coords))
        return np.asarray(self.values)[cell]


@dataclass(frozen=True)
class Logistic:
    """``lo + (hi - lo) / (1 + exp(-g(x)))``, keeping values inside ``(lo, hi)``."""

    inner: Callable
    lo: float = 0.1
    hi: float = 0.9

    def __call__(self, x) -> np.ndarray:
        return self.lo + (self.hi - self.lo) / (1.0 + np.exp(-self.inner(x)))


@dataclass(frozen=True)
class DGPSpec:
    """A simulation design with known nuisances.

    Parameters
    ----------
    d_x : int
    c_idx : tuple of int
        Personalization coordinates; empty for a marginal estimand.
    pi0 : callable
        ``E[A | X]``; for Bernoulli treatment the propensity score.
    base : callable
        ``mu(0, x)``.
    tau : callable
        ``mu(1, x) - mu(0, x)``.
    noise_sd : float
    treatment : {"bernoulli", "continuous"}
    halfwidth : float
        Half-width ``h`` of the uniform treatment residual (continuous only).
    noise : {"gaussian", "uniform"}
        Uniform noise keeps outcomes bounded.
    eps : float
        Required positivity margin, ``eps <= pi0 <= 1 - eps``.
    """

    d_x: int
    c_idx: tuple[int, ...]
    pi0: Callable
    base: Callable
    tau: Callable
    noise_sd: float = 1.0
    treatment: str = "bernoulli"
    halfwidth: float = 0.5
    noise: str = "gaussian"
    eps: float = 0.05
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.treatment not in ("bernoulli", "continuous"):
            raise ValueError(f"unknown treatment model {self.treatment!r}")
        if self.noise not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.treatment == "bernoulli":
            if self.eps < 0.05:
                raise ValueError(f"positivity margin eps={self.eps} below 0.05")
            self.check_positivity()

    def check_positivity(self, grid: int = 65) -> None:
        g = np.linspace(0.0, 1.0, grid)
        if self.d_x <= 3:
            pts = np.array(list(itertools.product(g, repeat=self.d_x)))
        else:
            rng = np.random.default_rng(0)
            pts = rng.random((200_000, self.d_x))
        p = self.pi0(pts)
        if p.min() < self.eps - 1e-12 or p.max() > 1 - self.eps + 1e-12:
            raise ValueError(
                f"positivity violated: pi0 ranges over [{p.min():.4f}, {p.max():.4f}], "
                f"needs [{self.eps}, {1 - self.eps}]")

    # nuisances -------------------------------------------------------------

    def mu(self, a, x) -> np.ndarray:
        return self.base(x) + np.asarray(a, dtype=float) * self.tau(x)

    def eta0(self, x) -> np.ndarray:
        """``E[Y | X]``."""
        return self.base(x) + self.pi0(x) * self.tau(x)

    def treatment_variance(self, x) -> np.ndarray:
        p = self.pi0(x)
        if self.treatment == "bernoulli":
            return p * (1.0 - p)
        return np.full_like(p, self.halfwidth ** 2 / 3.0)

    def conditional_cov(self, x) -> np.ndarray:
        """``Cov(A, Y | X)``."""
        return self.treatment_variance(x) * self.tau(x)

    def _fun(self, fun) -> LinearFunctional:
        f = get_functional(fun) if isinstance(fun, str) else fun
        if f.binary_treatment and self.treatment != "bernoulli":
            raise ValueError(f"estimand {f.name!r} needs binary treatment")
        return f

    def gamma0(self, fun) -> Callable:
        name = self._fun(fun).name
        if name == "cov":
            return self.eta0
        if name == "trt":
            return lambda x: self.mu(1.0, x)
        if name == "ctrl":
            return lambda x: self.mu(0.0, x)
        raise ValueError(f"no closed-form gamma_0 for {name!r}")

    def alpha0(self, fun) -> Callable:
        name = self._fun(fun).name
        if name == "cov":
            return lambda x: -self.pi0(x)
        if name == "trt":
            return lambda x: 1.0 / self.pi0(x)
        if name == "ctrl":
            return lambda x: 1.0 / (1.0 - self.pi0(x))
        raise ValueError(f"no closed-form alpha_0 for {name!r}")

    def psi0(self, fun) -> Callable:
        """``E[f_0 | X = x]``, the integrand of the conditional estimand."""
        if fun == "cate":
            return self.tau
        name = self._fun(fun).name
        if name == "cov":
            return self.conditional_cov
        return self.gamma0(name)


def sample(dgp: DGPSpec, n: int, seed: int = 0, rep: int = 0) -> Dataset:
    """Draw ``n`` rows from stream ``(seed, rep)``; bit-reproducible and order-free."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep), SAMPLE_STREAM])))
    x = rng.random((n, dgp.d_x))
    p = dgp.pi0(x)
    if dgp.treatment == "bernoulli":
        a = (rng.random(n) < p).astype(float)
    else:
        a = p + rng.uniform(-dgp.halfwidth, dgp.halfwidth, n)
    if dgp.noise == "gaussian":
        e = rng.standard_normal(n) * dgp.noise_sd
    else:
        h = np.sqrt(3.0) * dgp.noise_sd
        e = rng.uniform(-h, h, n)
    y = dgp.mu(a, x) + e
    return Dataset(x, a, y, dgp.c_idx)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def _gauss_grid(dim: int, panels: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on ``[0, 1]^dim``."""
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.arange(panels) / panels
    nodes = (edges[:, None] + (t[None, :] + 1.0) / (2.0 * panels)).reshape(-1)
    weights = np.tile(w / (2.0 * panels), panels)
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    wts = np.ones(pts.shape[0])
    for g in np.meshgrid(*([weights] * dim), indexing="ij"):
        wts = wts * g.reshape(-1)
    return pts, wts


def _integrate_given(fn, d_x, c_idx, c, panels, order) -> np.ndarray:
    free = [j for j in range(d_x) if j not in c_idx]
    pts, wts = _gauss_grid(len(free), panels, order)
    c = np.atleast_2d(np.asarray(c, dtype=float))
    out = np.empty(c.shape[0])
    for i, ci in enumerate(c):
        x = np.empty((pts.shape[0], d_x))
        x[:, free] = pts
        x[:, list(c_idx)] = ci
        out[i] = np.dot(wts, fn(x))
    return out


def integrate(fn, d_x: int, c_idx=(), c=None, tol: float = 1e-10, order: int = 8,
              start_panels: int = 4, max_panels: int = 512) -> tuple[np.ndarray, float]:
    """``E[fn(X) | X[c_idx] = c]`` for uniform ``X`` by panel doubling.

    Returns the value and the last change between refinements.

    Raises
    ------
    QuadratureError
        If the change does not fall below ``tol``.
    """
    c_idx = tuple(c_idx)
    if c is None:
        c_idx, c = (), np.zeros((1, 0))
    free = d_x - len(c_idx)
    if free == 0:
        x = np.zeros((np.atleast_2d(c).shape[0], d_x))
        x[:, list(c_idx)] = np.atleast_2d(c)
        return fn(x), 0.0
    panels = start_panels
    prev = _integrate_given(fn, d_x, c_idx, c, panels, order)
    err = float("inf")
    while panels < max_panels and (panels * 2 * order) ** free <= 4_000_000:
        panels *= 2
        cur = _integrate_given(fn, d_x, c_idx, c, panels, order)
        err = float(np.max(np.abs(cur - prev)))
        if err < tol:
            return cur, err
        prev = cur
    raise QuadratureError(f"quadrature did not converge to {tol:g}; last change {err:.3e}")


def true_theta(dgp: DGPSpec, fun, c="marginal", tol: float = 1e-10) -> np.ndarray | float:
    """Ground truth ``E[f_0 | C = c]`` (or the marginal mean).

    The error bound of the adaptive quadrature is below ``tol``; functions
    that are piecewise polynomial on dyadic grids are integrated exactly.
    """
    psi = dgp.psi0(fun)
    if isinstance(c, str):
        if c != "marginal":
            raise ValueError(f"c must be a point array or 'marginal', got {c!r}")
        val, _ = integrate(psi, dgp.d_x, tol=tol)
        return float(val[0])
    if not dgp.c_idx:
        raise ValueError("DGP has no personalization coordinates; use c='marginal'")
    c = np.asarray(c, dtype=float)
    c = c.reshape(-1, len(dgp.c_idx))
    val, _ = integrate(psi, dgp.d_x, dgp.c_idx, c, tol=tol)
    return val


def monte_carlo_theta(dgp: DGPSpec, fun, n_draws: int = 10_000_000, seed: int = 0,
                      chunk: int = 1_000_000) -> tuple[float, float]:
    """Marginal truth by simulation: mean and standard error of ``f_0``."""
    from ..second_stage import pseudo_outcome_values
    comps = [(1.0, "trt"), (-1.0, "ctrl")] if fun == "cate" else [(1.0, fun)]
    s = s2 = 0.0
    done = 0
    rep = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        data = sample(dgp, m, seed=seed, rep=10_000_000 + rep)
        f0 = np.zeros(m)
        for sign, name in comps:
            f = dgp._fun(name)
            f0 += sign * pseudo_outcome_values(f, data, dgp.gamma0(f), dgp.alpha0(f))
        s += f0.sum()
        s2 += (f0 ** 2).sum()
        done += m
        rep += 1
    mean = s / done
    var = s2 / done - mean ** 2
    return mean, float(np.sqrt(var / done))


def quadrature_population(dgp: DGPSpec, segments: int = 1, panels_per_segment: int = 8,
                          order: int = 8) -> DiscretePopulation:
    """Finite population whose moments up to second order in ``A`` match the DGP.

    ``X`` takes composite Gauss-Legendre nodes on panels that refine an equal
    ``segments`` grid, so integrals of functions that are smooth within the
    cells of that grid converge fast. ``Y`` holds ``E[Y | A, X]``. Continuous
    treatment is replaced by the two points ``pi0 +- h / sqrt(3)``.
    """
    panels = int(segments) * int(panels_per_segment)
    pts, wts = _gauss_grid(dgp.d_x, panels, order)
    p = dgp.pi0(pts)
    if dgp.treatment == "bernoulli":
        a_lo, a_hi = np.zeros_like(p), np.ones_like(p)
        w_lo, w_hi = wts * (1.0 - p), wts * p
    else:
        s = dgp.halfwidth / np.sqrt(3.0)
        a_lo, a_hi = p - s, p + s
        w_lo = w_hi = 0.5 * wts
    x = np.concatenate([pts, pts])
    a = np.concatenate([a_lo, a_hi])
    prob = np.concatenate([w_lo, w_hi])
    prob = prob / prob.sum()
    return DiscretePopulation(x, a, dgp.mu(a, x), prob)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def piecewise_cov_dgp(cov: float = 0.25, base_segments: int = 4, noise_sd: float = 1.0,
                   seed: int = 0) -> DGPSpec:
    """Marginal covariance design with ``pi0 = 1/2`` and piecewise-constant ``E[Y|X]``.

    ``tau = 4 cov`` keeps ``Cov(A, Y | X) = cov`` constant; ``E[Y | X]`` is
    constant on ``base_segments`` equal cells, so any degree-0 partition
    refining that grid represents both nuisances exactly.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xA99])))
    values = tuple(float(v) for v in rng.uniform(-1.0, 1.0, base_segments))
    return DGPSpec(
        d_x=1, c_idx=(), pi0=Constant(0.5), base=PiecewiseConstant(values, base_segments),
        tau=Constant(4.0 * cov), noise_sd=noise_sd, name="piecewise_cov",
        meta={"cov": cov, "base_segments": base_segments})


def rate_dgp(order: float = 1.0, noise_sd: float = 1.0, seed: int = 1) -> DGPSpec:
    """One covariate, ``C = X``; smooth propensity and outcome surfaces."""
    return DGPSpec(
        d_x=1, c_idx=(0,),
        pi0=Logistic(CosineSeries.with_order(2.0, 4, 1.0, seed=seed), 0.2, 0.8),
        base=CosineSeries.with_order(order, 24, 1.0, seed=seed + 1),
        tau=CosineSeries.with_order(order, 24, 0.5, offset=1.0, seed=seed + 2),
        noise_sd=noise_sd, name="rate", meta={"order": order})


def cate_dgp(eps: float = 0.1, noise_sd: float = 1.0, seed: int = 2) -> DGPSpec:
    """Two covariates, ``C = X_1``; smooth ``tau(x_1)`` and propensity in ``[eps, 1-eps]``."""
    return DGPSpec(
        d_x=2, c_idx=(0,),
        pi0=Logistic(CosineSeries.with_order(2.0, 2, 1.0, coords=(0, 1), seed=seed), eps, 1 - eps),
        base=CosineSeries.with_order(2.0, 3, 1.0, coords=(0, 1), seed=seed + 1),
        tau=CosineSeries.with_order(2.0, 2, 0.5, offset=1.0, coords=(0,), seed=seed + 2),
        noise_sd=noise_sd, eps=eps, name="cate", meta={"eps": eps})


def smooth_dgp(d_x: int = 2, c_idx=(0,), seed: int = 3, noise_sd: float = 1.0) -> DGPSpec:
    """Generic smooth design used by diagnostics."""
    coords = tuple(range(d_x))
    return DGPSpec(
        d_x=d_x, c_idx=tuple(c_idx),
        pi0=Logistic(CosineSeries.with_order(2.0, 3, 1.0, coords=coords, seed=seed), 0.15, 0.85),
        base=CosineSeries.with_order(2.0, 4, 1.0, coords=coords, seed=seed + 1),
        tau=CosineSeries.with_order(2.0, 3, 0.5, offset=1.0, coords=coords, seed=seed + 2),
        noise_sd=noise_sd, name="smooth")


PRESETS = {"piecewise_cov": piecewise_cov_dgp, "rate": rate_dgp, "cate": cate_dgp, "smooth": smooth_dgp}
