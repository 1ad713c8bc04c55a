"""Tensor-product piecewise-polynomial bases on a regular hypercube partition.

Each basis function is a monomial in cell-local coordinates supported on a
single cell, so every Gram matrix built from the basis is block diagonal
with one ``m x m`` block per cell (``m = binom(dim + degree, dim)``).
Designs keep that structure explicit; :class:`TransformedBasis` drops it for
arbitrary linear reparameterizations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

MAX_BASIS_SIZE = 2**31


class SingularGramError(np.linalg.LinAlgError):
    """A Gram matrix that had to be inverted is (numerically) singular."""


class DomainError(ValueError):
    """A point lies outside the basis domain."""


@dataclass(frozen=True)
class BasisSpec:
    """Partition and polynomial degree of a spline basis.

    Parameters
    ----------
    dim : int
        Number of coordinates (``d_X`` for ``q``, ``d_C`` for ``b``).
    segments_per_dim : int
        Equal-width segments along every axis.
    degree : int
        Total polynomial degree within a cell.
    lo, hi : tuple of float, optional
        Domain box; the unit hypercube when omitted.
    """

    dim: int
    segments_per_dim: int
    degree: int = 1
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if int(self.segments_per_dim) < 1:
            raise ValueError(f"segments_per_dim must be positive, got {self.segments_per_dim}")
        if int(self.degree) < 0:
            raise ValueError(f"degree must be non-negative, got {self.degree}")
        lo = (0.0,) * self.dim if self.lo is None else tuple(float(v) for v in self.lo)
        hi = (1.0,) * self.dim if self.hi is None else tuple(float(v) for v in self.hi)
        if len(lo) != self.dim or len(hi) != self.dim:
            raise ValueError("domain bounds must have one entry per dimension")
        if not all(math.isfinite(v) for v in lo + hi):
            raise ValueError("domain bounds must be finite")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_cells(self) -> int:
        return self.segments_per_dim ** self.dim

    @property
    def monomials_per_cell(self) -> int:
        return math.comb(self.dim + self.degree, self.dim)

    @property
    def size(self) -> int:
        return self.n_cells * self.monomials_per_cell


def _exponents(dim: int, degree: int) -> np.ndarray:
    rows = [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    rows.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return np.array(rows, dtype=int).reshape(-1, dim)


class Design:
    """Basis values at a set of points (abstract)."""

    n_basis: int

    def __len__(self) -> int:
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        raise NotImplementedError

    def gram(self, w=None, *, normalize=True) -> "GramMatrix":
        raise NotImplementedError

    def moment(self, w) -> np.ndarray:
        """``sum_i w_i v(x_i)`` as a flat vector of basis size."""
        raise NotImplementedError

    def predict(self, coef: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class BlockDesign(Design):
    """Basis values stored as the cell of each point plus its local monomials."""

    def __init__(self, cells: np.ndarray, local: np.ndarray, n_cells: int):
        self.cells = cells
        self.local = local
        self.n_cells = n_cells
        self.m = local.shape[1]
        self.n_basis = n_cells * self.m

    def __len__(self) -> int:
        return self.cells.shape[0]

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self), self.n_basis))
        cols = self.cells[:, None] * self.m + np.arange(self.m)[None, :]
        np.put_along_axis(out, cols, self.local, axis=1)
        return out

    def gram(self, w=None, *, normalize=True) -> "GramMatrix":
        n = len(self)
        if n == 0:
            raise ValueError("cannot form a Gram matrix from zero points")
        w = np.ones(n) if w is None else np.asarray(w, dtype=float)
        m, L = self.m, self.local
        blocks = np.empty((self.n_cells, m, m))
        for j in range(m):
            for k in range(j, m):
                s = np.bincount(self.cells, weights=w * L[:, j] * L[:, k], minlength=self.n_cells)
                blocks[:, j, k] = s
                blocks[:, k, j] = s
        if normalize:
            blocks /= n
        return GramMatrix(blocks=blocks, n_samples=n)

    def moment(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        out = np.empty((self.n_cells, self.m))
        for j in range(self.m):
            out[:, j] = np.bincount(self.cells, weights=w * self.local[:, j], minlength=self.n_cells)
        return out.reshape(-1)

    def predict(self, coef: np.ndarray) -> np.ndarray:
        c = np.asarray(coef, dtype=float).reshape(self.n_cells, self.m)
        return np.einsum("ij,ij->i", self.local, c[self.cells])

    def counts(self, w=None) -> np.ndarray:
        return np.bincount(self.cells, weights=w, minlength=self.n_cells)


class DenseDesign(Design):
    """Basis values as a plain ``n x k`` matrix."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float)
        self.n_basis = self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def dense(self) -> np.ndarray:
        return self.values

    def gram(self, w=None, *, normalize=True) -> "GramMatrix":
        n = len(self)
        if n == 0:
            raise ValueError("cannot form a Gram matrix from zero points")
        V = self.values
        G = V.T @ V if w is None else (V * np.asarray(w, dtype=float)[:, None]).T @ V
        if normalize:
            G = G / n
        return GramMatrix(dense_matrix=0.5 * (G + G.T), n_samples=n)

    def moment(self, w) -> np.ndarray:
        return self.values.T @ np.asarray(w, dtype=float)

    def predict(self, coef: np.ndarray) -> np.ndarray:
        return self.values @ np.asarray(coef, dtype=float)


@dataclass
class GramMatrix:
    """Symmetric p.s.d. matrix ``(1/n) sum_i w_i v_i v_i^T``.

    Stored as per-cell blocks when the basis is local, otherwise dense.
    """

    blocks: np.ndarray | None = None
    dense_matrix: np.ndarray | None = None
    n_samples: int = 0
    j_weighted: bool = False
    _eig: tuple | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        if self.blocks is not None:
            return self.blocks.shape[0] * self.blocks.shape[1]
        return self.dense_matrix.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        if self.dense_matrix is None:
            self.dense_matrix = scipy.linalg.block_diag(*self.blocks)
        return self.dense_matrix

    def eigenvalues(self) -> np.ndarray:
        if self.blocks is not None:
            return np.linalg.eigvalsh(self.blocks).reshape(-1)
        return np.linalg.eigvalsh(self.dense_matrix)

    @property
    def eigen_summary(self) -> tuple[float, float]:
        """``(lambda_min, lambda_max)``, computed on first access."""
        if self._eig is None:
            ev = self.eigenvalues()
            self._eig = (float(ev.min()), float(ev.max()))
        return self._eig

    @property
    def lambda_min(self) -> float:
        return self.eigen_summary[0]

    @property
    def lambda_max(self) -> float:
        return self.eigen_summary[1]

    def is_psd(self, rtol: float = 1e-10) -> bool:
        lo, hi = self.eigen_summary
        return lo >= -rtol * max(abs(hi), abs(lo), np.finfo(float).tiny)

    def is_pd(self, rtol: float = 1e-12) -> bool:
        lo, hi = self.eigen_summary
        return hi > 0 and lo > rtol * hi


@dataclass(frozen=True)
class Whitener:
    """Symmetric inverse square root ``W`` of a reference Gram, ``W G W^T = I``."""

    blocks: np.ndarray | None = None
    dense_matrix: np.ndarray | None = None

    @property
    def matrix(self) -> np.ndarray:
        if self.dense_matrix is not None:
            return self.dense_matrix
        return scipy.linalg.block_diag(*self.blocks)

    def apply(self, gram: GramMatrix) -> GramMatrix:
        if self.blocks is not None and gram.blocks is not None:
            W = self.blocks
            out = W @ gram.blocks @ np.swapaxes(W, 1, 2)
            return GramMatrix(blocks=0.5 * (out + np.swapaxes(out, 1, 2)),
                              n_samples=gram.n_samples, j_weighted=gram.j_weighted)
        W = self.matrix
        out = W @ gram.matrix @ W.T
        return GramMatrix(dense_matrix=0.5 * (out + out.T),
                          n_samples=gram.n_samples, j_weighted=gram.j_weighted)


def _inv_sqrt(G: np.ndarray, tol: float) -> np.ndarray:
    """Symmetric inverse square root of one matrix or a stack of blocks."""
    vals, vecs = np.linalg.eigh(G)
    top = float(np.max(vals))
    flat = vals.reshape(-1, vals.shape[-1])
    worst = flat.min(axis=1)
    bad = np.flatnonzero(worst <= tol * max(top, 0.0))
    if top <= 0 or bad.size:
        where = f" in cell {bad[0]}" if G.ndim == 3 and bad.size else ""
        lam = float(worst[bad[0]]) if bad.size else float(worst.min())
        raise SingularGramError(
            f"reference Gram is singular{where}: eigenvalue {lam:.3e} "
            f"(largest {top:.3e})")
    return (vecs / np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2)


class SplineBasis:
    """Piecewise-polynomial basis over an equal partition of a box.

    Basis index ``cell * m + j`` is monomial ``j`` (see :attr:`exponents`)
    of the local coordinate ``u = (x - center) / half_width`` in ``[-1, 1]``
    on cell ``cell``; cells are numbered in C order of their per-axis index.
    """

    def __init__(self, spec: BasisSpec):
        if spec.size >= MAX_BASIS_SIZE:
            raise ValueError(f"basis size {spec.size} exceeds the supported maximum 2^31")
        lo = np.array(spec.lo)
        hi = np.array(spec.hi)
        if np.any(hi <= lo):
            raise ValueError(f"zero-volume domain: lo={spec.lo}, hi={spec.hi}")
        self.spec = spec
        self.lo = lo
        self.hi = hi
        self.width = (hi - lo) / spec.segments_per_dim
        self.exponents = _exponents(spec.dim, spec.degree)

    def __repr__(self) -> str:
        s = self.spec
        return f"SplineBasis(dim={s.dim}, segments={s.segments_per_dim}, degree={s.degree})"

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def size(self) -> int:
        return self.spec.size

    @property
    def n_cells(self) -> int:
        return self.spec.n_cells

    @property
    def m(self) -> int:
        return self.exponents.shape[0]

    @property
    def max_cell_diameter(self) -> float:
        return float(np.sqrt(np.sum(self.width ** 2)))

    def edge(self, k) -> np.ndarray:
        """Lower edge ``lo + k (hi - lo) / segments`` of per-axis segment ``k``."""
        return self.lo + np.asarray(k) * (self.hi - self.lo) / self.spec.segments_per_dim

    @cached_property
    def cells(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(lower, upper)`` corners of every cell, in cell-id order."""
        j = self.spec.segments_per_dim
        out = []
        for idx in itertools.product(range(j), repeat=self.dim):
            k = np.array(idx)
            out.append((self.edge(k), self.edge(k + 1)))
        return out

    def centers(self) -> np.ndarray:
        return np.array([0.5 * (a + b) for a, b in self.cells])

    def _points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x.reshape(1, -1) if x.shape[0] == self.dim and self.dim > 1 else x.reshape(-1, 1)
        if x.shape[1] != self.dim:
            raise ValueError(f"points have {x.shape[1]} coordinates, basis has dim {self.dim}")
        return x

    def _axis_index(self, x: np.ndarray, clamp: bool) -> np.ndarray:
        if clamp:
            x = np.clip(x, self.lo, self.hi)
        elif np.any(x < self.lo) or np.any(x > self.hi) or not np.all(np.isfinite(x)):
            bad = np.flatnonzero(np.any((x < self.lo) | (x > self.hi) | ~np.isfinite(x), axis=1))
            raise DomainError(
                f"{bad.size} point(s) outside the domain [{self.spec.lo}, {self.spec.hi}], "
                f"first at row {bad[0]}: {x[bad[0]].tolist()}")
        j = self.spec.segments_per_dim
        t = np.floor((x - self.lo) * j / (self.hi - self.lo)).astype(np.int64)
        t = np.clip(t, 0, j - 1)
        # snap to the exact cell edges
        t = np.where(x < self.edge(t), t - 1, t)
        t = np.where((t < j - 1) & (x >= self.edge(t + 1)), t + 1, t)
        return np.clip(t, 0, j - 1), x

    def cell_index(self, x, clamp: bool = False) -> np.ndarray:
        """Cell id of each point; ``[lo, hi)`` per segment, last segment closed."""
        idx, _ = self._axis_index(self._points(x), clamp)
        return np.ravel_multi_index(tuple(idx.T), (self.spec.segments_per_dim,) * self.dim)

    def design(self, x, clamp: bool = False) -> BlockDesign:
        x = self._points(x)
        idx, x = self._axis_index(x, clamp)
        cells = np.ravel_multi_index(tuple(idx.T), (self.spec.segments_per_dim,) * self.dim)
        u = 2.0 * (x - self.edge(idx)) / self.width - 1.0
        if self.spec.degree == 0:
            local = np.ones((x.shape[0], 1))
        else:
            local = np.prod(u[:, None, :] ** self.exponents[None, :, :], axis=2)
        return BlockDesign(cells, local, self.n_cells)

    def evaluate(self, x, clamp: bool = False) -> np.ndarray:
        """Dense basis values; a vector for one point, a matrix for several."""
        x_arr = np.asarray(x, dtype=float)
        single = x_arr.ndim == 0 or (x_arr.ndim == 1 and (self.dim > 1 or x_arr.shape[0] == 1))
        out = self.design(x, clamp).dense()
        return out[0] if single else out

    def same_neighborhood(self, x, x2) -> np.ndarray | bool:
        same = self.cell_index(x) == self.cell_index(x2)
        return bool(same[0]) if same.shape == (1,) else same

    def gram(self, points, weights=None) -> GramMatrix:
        return self.design(points).gram(weights)

    def whiten(self, reference: GramMatrix, tol: float = 1e-12) -> Whitener:
        if reference.blocks is not None:
            return Whitener(blocks=_inv_sqrt(reference.blocks, tol))
        return Whitener(dense_matrix=_inv_sqrt(reference.matrix, tol))

    def polynomial_coefficients(self, g_coef: dict[tuple[int, ...], float]) -> np.ndarray:
        """Coefficients reproducing a global polynomial ``sum c_e x^e`` exactly.

        Only exponents of total degree ``<= degree`` are representable.
        """
        centers = self.centers()
        half = self.width / 2.0
        m = self.m
        index = {tuple(e): j for j, e in enumerate(self.exponents)}
        coef = np.zeros((self.n_cells, m))
        for e, c in g_coef.items():
            e = tuple(int(v) for v in e)
            if sum(e) > self.spec.degree:
                raise ValueError(f"monomial {e} exceeds basis degree {self.spec.degree}")
            # x_k = center_k + half_k * u_k; expand each factor binomially
            per_axis = []
            for k, ek in enumerate(e):
                per_axis.append([(r, math.comb(ek, r) * centers[:, k] ** (ek - r) * half[k] ** r)
                                 for r in range(ek + 1)])
            for combo in itertools.product(*per_axis):
                powers = tuple(r for r, _ in combo)
                term = np.full(self.n_cells, float(c))
                for _, v in combo:
                    term = term * v
                coef[:, index[powers]] += term
        return coef.reshape(-1)


class TransformedBasis:
    """The reparameterized basis ``x -> W q(x)`` for an invertible ``W``.

    Locality is lost, so designs are dense.
    """

    def __init__(self, base: SplineBasis, transform: np.ndarray):
        W = np.asarray(transform, dtype=float)
        if W.shape != (base.size, base.size):
            raise ValueError(f"transform must be {base.size}x{base.size}, got {W.shape}")
        self.base = base
        self.transform = W
        self.spec = base.spec

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def size(self) -> int:
        return self.base.size

    def cell_index(self, x, clamp: bool = False) -> np.ndarray:
        return self.base.cell_index(x, clamp)

    def design(self, x, clamp: bool = False) -> DenseDesign:
        return DenseDesign(self.base.design(x, clamp).dense() @ self.transform.T)

    def evaluate(self, x, clamp: bool = False) -> np.ndarray:
        return self.base.evaluate(x, clamp) @ self.transform.T

    def gram(self, points, weights=None) -> GramMatrix:
        return self.design(points).gram(weights)

    def whiten(self, reference: GramMatrix, tol: float = 1e-12) -> Whitener:
        return Whitener(dense_matrix=_inv_sqrt(reference.matrix, tol))


def build_basis(spec: BasisSpec) -> SplineBasis:
    return SplineBasis(spec)


def cell_index(basis: SplineBasis, x, clamp: bool = False):
    return basis.cell_index(x, clamp)


def evaluate(basis, x, clamp: bool = False) -> np.ndarray:
    return basis.evaluate(x, clamp)


def same_neighborhood(basis: SplineBasis, x, x2):
    return basis.same_neighborhood(x, x2)


def gram(basis, points, weights=None, j_mask=None) -> GramMatrix:
    """``(1/n) sum_i w_i v(x_i) v(x_i)^T``; ``j_mask`` multiplies the weights."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0] if points.ndim else 0
    if n == 0:
        raise ValueError("gram needs at least one point")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape[0] != n:
        raise ValueError(f"{w.shape[0]} weights for {n} points")
    if j_mask is not None:
        w = w * np.asarray(j_mask, dtype=float)
    G = basis.design(points).gram(w)
    G.j_weighted = j_mask is not None
    return G


def whiten(basis, reference_gram: GramMatrix, tol: float = 1e-12) -> Whitener:
    return basis.whiten(reference_gram, tol)


# ---------------------------------------------------------------------------
# normal-equation solves
# ---------------------------------------------------------------------------

@dataclass
class SolveInfo:
    """What the SPD solve had to do besides a clean factorization."""

    ridged_blocks: tuple[int, ...] = ()
    empty_blocks: tuple[int, ...] = ()
    ridge: float = 0.0

    @property
    def clean(self) -> bool:
        return not self.ridged_blocks and not self.empty_blocks


RIDGE_REL = 1e-10
_PIVOT_REL = 1e-12


def _chol_ok(L: np.ndarray) -> bool:
    d = np.abs(np.diagonal(L, axis1=-2, axis2=-1))
    return bool(np.all(np.isfinite(L))) and bool(np.all(d.min(axis=-1) ** 2 > _PIVOT_REL * d.max(axis=-1) ** 2))


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]


def _factor_with_ridge(G: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        L = np.linalg.cholesky(G)
        if _chol_ok(L):
            return L, 0.0
    except np.linalg.LinAlgError:
        pass
    k = G.shape[0]
    ridge = RIDGE_REL * float(np.trace(G)) / k
    try:
        L = np.linalg.cholesky(G + ridge * np.eye(k))
    except np.linalg.LinAlgError as exc:
        raise SingularGramError(f"Gram not factorizable even with ridge {ridge:.3e}") from exc
    return L, ridge


def solve_gram(G: GramMatrix, rhs: np.ndarray, allow_ridge: bool = True) -> tuple[np.ndarray, SolveInfo]:
    """Solve ``G x = rhs`` by Cholesky, block by block when ``G`` is local.

    Empty blocks (zero trace) get zero coefficients. A block whose
    factorization fails is retried once with ``1e-10 * trace / k`` on the
    diagonal, unless ``allow_ridge`` is false.
    """
    rhs = np.asarray(rhs, dtype=float)
    if G.blocks is None:
        A = G.dense_matrix
        if np.trace(A) <= 0:
            return np.zeros_like(rhs), SolveInfo(empty_blocks=(0,))
        if allow_ridge:
            L, ridge = _factor_with_ridge(A)
        else:
            L, ridge = _strict_factor(A), 0.0
        return _chol_solve(L, rhs), SolveInfo(ridged_blocks=(0,) if ridge else (), ridge=ridge)

    B = G.blocks
    nc, m, _ = B.shape
    b = rhs.reshape(nc, m)
    out = np.zeros((nc, m))
    trace = np.trace(B, axis1=1, axis2=2)
    live = np.flatnonzero(trace > 0)
    empty = tuple(int(c) for c in np.flatnonzero(trace <= 0))
    ridged = []
    ridge_max = 0.0
    if live.size:
        try:
            L = np.linalg.cholesky(B[live])
            good = np.all(np.isfinite(L), axis=(1, 2))
            d = np.abs(np.diagonal(L, axis1=1, axis2=2))
            good &= d.min(axis=1) ** 2 > _PIVOT_REL * d.max(axis=1) ** 2
        except np.linalg.LinAlgError:
            L = None
            good = np.zeros(live.size, dtype=bool)
        if L is not None and good.any():
            out[live[good]] = _chol_solve(L[good], b[live[good]])
        for c in live[~good]:
            if not allow_ridge:
                _strict_factor(B[c], label=f"cell {c}")
            Lc, ridge = _factor_with_ridge(B[c])
            out[c] = _chol_solve(Lc, b[c])
            if ridge:
                ridged.append(int(c))
                ridge_max = max(ridge_max, ridge)
    return out.reshape(-1), SolveInfo(tuple(ridged), empty, ridge_max)


def _strict_factor(A: np.ndarray, label: str = "Gram") -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        L = None
    if L is None or not _chol_ok(L):
        ev = np.linalg.eigvalsh(A)
        raise SingularGramError(f"{label} is singular: smallest eigenvalue {ev.min():.3e}")
    return L


def solve_gram_strict(G: GramMatrix, rhs: np.ndarray) -> np.ndarray:
    """Like :func:`solve_gram` but every block must be nonsingular."""
    if G.blocks is not None:
        empty = np.flatnonzero(np.trace(G.blocks, axis1=1, axis2=2) <= 0)
        if empty.size:
            raise SingularGramError(f"Gram has empty cell block(s) {empty.tolist()[:5]}")
    x, _ = solve_gram(G, rhs, allow_ridge=False)
    return x
