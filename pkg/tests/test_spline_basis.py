import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossfit_dr.spline_basis import (
    BasisSpec,
    DomainError,
    GramMatrix,
    SingularGramError,
    SplineBasis,
    TransformedBasis,
    build_basis,
    gram,
    same_neighborhood,
    solve_gram,
    solve_gram_strict,
    whiten,
)


def brute_cell(x, segments):
    """Reference cell index by scanning every cell's half-open box."""
    d = x.shape[0]
    for idx in itertools.product(range(segments), repeat=d):
        lo = np.array(idx) / segments
        hi = (np.array(idx) + 1) / segments
        upper_ok = [(x[k] < hi[k]) or (idx[k] == segments - 1 and x[k] <= hi[k]) for k in range(d)]
        if np.all(x >= lo) and all(upper_ok):
            return int(np.ravel_multi_index(idx, (segments,) * d))
    raise AssertionError("point not in any cell")


class TestSpec:
    def test_sizes(self):
        spec = BasisSpec(2, 3, 1)
        assert spec.n_cells == 9
        assert spec.monomials_per_cell == 3
        assert spec.size == 27

    def test_degree_zero_size_equals_cells(self):
        assert BasisSpec(3, 2, 0).size == 8

    @pytest.mark.parametrize("kw", [dict(dim=0, segments_per_dim=1), dict(dim=1, segments_per_dim=0),
                                    dict(dim=1, segments_per_dim=1, degree=-1)])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            BasisSpec(**kw)

    def test_zero_volume_domain(self):
        with pytest.raises(ValueError, match="zero-volume"):
            SplineBasis(BasisSpec(1, 2, 0, lo=(0.0,), hi=(0.0,)))

    def test_size_cap(self):
        with pytest.raises(ValueError, match="2\\^31"):
            SplineBasis(BasisSpec(4, 216, 0))


class TestCellIndex:
    def test_boundaries(self):
        b = build_basis(BasisSpec(1, 2, 0))
        assert b.cell_index([0.3, 0.5, 1.0]).tolist() == [0, 1, 1]

    def test_out_of_domain(self):
        b = build_basis(BasisSpec(1, 2, 0))
        with pytest.raises(DomainError):
            b.cell_index([1.2])
        assert b.cell_index([1.2], clamp=True).tolist() == [1]

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            build_basis(BasisSpec(1, 2, 0)).cell_index([np.nan])

    @given(st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, dim, segments, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((20, dim))
        # include exact grid points
        x[0] = rng.integers(0, segments + 1, dim) / segments
        b = build_basis(BasisSpec(dim, segments, 0))
        got = b.cell_index(x)
        want = [brute_cell(row, segments) for row in x]
        assert got.tolist() == want

    def test_same_neighborhood(self):
        b = build_basis(BasisSpec(1, 4, 1))
        assert same_neighborhood(b, 0.1, 0.2)
        assert not same_neighborhood(b, 0.1, 0.3)


class TestEvaluate:
    def test_degree_zero_indicator(self):
        b = build_basis(BasisSpec(1, 2, 0))
        assert b.evaluate(0.3).tolist() == [1.0, 0.0]

    def test_local_linear_coordinate(self):
        b = build_basis(BasisSpec(1, 1, 1))
        assert np.allclose(b.evaluate(0.75), [1.0, 0.5])

    def test_exponent_order_constant_first(self):
        b = build_basis(BasisSpec(2, 3, 1))
        assert b.exponents.tolist() == [[0, 0], [1, 0], [0, 1]]

    def test_support_is_one_cell(self, rng):
        b = build_basis(BasisSpec(2, 3, 2))
        x = rng.random((50, 2))
        Q = b.evaluate(x)
        cells = b.cell_index(x)
        m = b.m
        for i in range(50):
            nz = np.flatnonzero(Q[i])
            assert set(nz // m) <= {cells[i]}

    def test_block_design_matches_dense(self, rng):
        b = build_basis(BasisSpec(2, 2, 2))
        x = rng.random((40, 2))
        w = rng.random(40)
        d = b.design(x)
        Q = d.dense()
        assert np.allclose(d.gram(w).matrix, (Q * w[:, None]).T @ Q / 40)
        assert np.allclose(d.moment(w), Q.T @ w)
        coef = rng.normal(size=b.size)
        assert np.allclose(d.predict(coef), Q @ coef)

    @given(st.integers(1, 2), st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**32 - 1))
    def test_polynomial_reproduction(self, dim, segments, degree, seed):
        rng = np.random.default_rng(seed)
        b = build_basis(BasisSpec(dim, segments, degree))
        poly = {tuple(e): float(rng.normal()) for e in b.exponents}
        coef = b.polynomial_coefficients(poly)
        x = rng.random((30, dim))
        want = sum(c * np.prod(x ** np.array(e), axis=1) for e, c in poly.items())
        assert np.max(np.abs(b.evaluate(x) @ coef - want)) < 1e-9

    def test_polynomial_degree_checked(self):
        with pytest.raises(ValueError):
            build_basis(BasisSpec(1, 2, 1)).polynomial_coefficients({(2,): 1.0})


class TestGramAndWhiten:
    def test_gram_errors(self):
        b = build_basis(BasisSpec(1, 2, 0))
        with pytest.raises(ValueError):
            gram(b, np.empty((0, 1)))
        with pytest.raises(ValueError):
            gram(b, np.zeros((3, 1)), weights=np.ones(2))

    def test_j_mask(self, rng):
        b = build_basis(BasisSpec(1, 3, 1))
        x = rng.random((60, 1))
        j = (rng.random(60) < 0.5).astype(float)
        G = gram(b, x, j_mask=j)
        Q = b.evaluate(x) * j[:, None]
        assert G.j_weighted
        assert np.allclose(G.matrix, Q.T @ Q / 60)

    def test_whiten_identity(self, rng):
        b = build_basis(BasisSpec(2, 3, 1))
        G = gram(b, rng.random((500, 2)))
        W = whiten(b, G)
        assert np.allclose(W.apply(G).matrix, np.eye(27), atol=1e-12)

    def test_whiten_singular_names_cell(self):
        b = build_basis(BasisSpec(1, 2, 1))
        G = gram(b, np.array([[0.1], [0.2], [0.3]]))
        with pytest.raises(SingularGramError, match="cell 1"):
            whiten(b, G)

    def test_psd_pd_flags(self):
        G = GramMatrix(dense_matrix=np.diag([1.0, 0.0]))
        assert G.is_psd() and not G.is_pd()
        assert not GramMatrix(dense_matrix=np.diag([1.0, -0.5])).is_psd()


class TestSolve:
    def test_matches_lstsq(self, rng):
        b = build_basis(BasisSpec(2, 2, 1))
        x = rng.random((200, 2))
        y = rng.normal(size=200)
        d = b.design(x)
        coef, info = solve_gram(d.gram(), d.moment(y) / 200)
        assert info.clean
        assert np.allclose(coef, np.linalg.lstsq(d.dense(), y, rcond=None)[0], atol=1e-10)

    def test_empty_block_zero(self):
        b = build_basis(BasisSpec(1, 2, 0))
        d = b.design(np.array([[0.1], [0.2]]))
        coef, info = solve_gram(d.gram(), d.moment(np.array([1.0, 3.0])) / 2)
        assert coef.tolist() == [2.0, 0.0]
        assert info.empty_blocks == (1,)
        with pytest.raises(SingularGramError):
            solve_gram_strict(d.gram(), d.moment(np.ones(2)))

    def test_singular_block_ridge(self):
        b = build_basis(BasisSpec(1, 1, 1))
        d = b.design(np.array([[0.3], [0.3]]))
        coef, info = solve_gram(d.gram(), d.moment(np.ones(2)) / 2)
        assert info.ridged_blocks == (0,)
        assert info.ridge > 0
        assert np.all(np.isfinite(coef))
        with pytest.raises(SingularGramError):
            solve_gram(d.gram(), d.moment(np.ones(2)), allow_ridge=False)


class TestTransformed:
    def test_dense_design(self, rng):
        b = build_basis(BasisSpec(1, 3, 1))
        W = rng.normal(size=(6, 6))
        t = TransformedBasis(b, W)
        x = rng.random((10, 1))
        assert np.allclose(t.evaluate(x), b.evaluate(x) @ W.T)
        with pytest.raises(ValueError):
            TransformedBasis(b, np.eye(5))

    def test_max_cell_diameter(self):
        b = build_basis(BasisSpec(2, 4, 0))
        assert math.isclose(b.max_cell_diameter, math.sqrt(2) / 4)
