"""Observation containers: samples, single observations and finite populations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class AffineMap:
    """Per-coordinate map ``u = (x - lo) / (hi - lo)`` onto the unit hypercube."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "AffineMap":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        # constant columns map to 0
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(lo=lo, hi=hi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=float) * (self.hi - self.lo)


def _check_c_idx(c_idx: Sequence[int], d: int) -> tuple[int, ...]:
    c_idx = tuple(int(i) for i in c_idx)
    if len(set(c_idx)) != len(c_idx):
        raise ValueError(f"duplicate personalization indices {c_idx}")
    if any(i < 0 or i >= d for i in c_idx):
        raise ValueError(f"personalization indices {c_idx} out of range for d_X={d}")
    return c_idx


@dataclass(frozen=True)
class Dataset:
    """A sample of ``Z = (X, A, Y)`` with ``C = X[:, c_idx]``.

    Parameters
    ----------
    x : ndarray, shape (n, d_X)
    a : ndarray, shape (n,)
    y : ndarray, shape (n,)
    c_idx : tuple of int
        Columns of ``x`` used as personalization variables. An empty tuple
        means no personalization (``C`` constant).
    scaler : AffineMap, optional
        Map that was applied to bring raw covariates to the unit hypercube.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    c_idx: tuple[int, ...] = (0,)
    scaler: AffineMap | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (x.shape[0] == a.shape[0] == y.shape[0]):
            raise ValueError(
                f"length mismatch: x has {x.shape[0]} rows, a {a.shape[0]}, y {y.shape[0]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "c_idx", _check_c_idx(self.c_idx, x.shape[1]))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def c(self) -> np.ndarray:
        """Personalization covariates; a column of zeros when ``c_idx`` is empty."""
        if not self.c_idx:
            return np.zeros((len(self), 1))
        return self.x[:, list(self.c_idx)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.a[idx], self.y[idx], self.c_idx, self.scaler)


@dataclass(frozen=True)
class ObservationZ:
    """A single observation ``z = (x, a, y)``."""

    x: np.ndarray
    a: float
    y: float
    c_idx: tuple[int, ...] = (0,)

    def as_dataset(self) -> Dataset:
        return Dataset(np.atleast_2d(np.asarray(self.x, dtype=float)),
                       [self.a], [self.y], self.c_idx)


def as_dataset(z) -> Dataset:
    if isinstance(z, Dataset):
        return z
    if isinstance(z, ObservationZ):
        return z.as_dataset()
    raise TypeError(f"expected Dataset or ObservationZ, got {type(z).__name__}")


@dataclass(frozen=True)
class DiscretePopulation:
    """A distribution over ``Z`` with finite support.

    Moments that are linear in ``Y`` are exact when ``y`` holds
    ``E[Y | A=a, X=x]`` instead of a draw, which is how quadrature
    populations are built.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        prob = np.asarray(self.prob, dtype=float).reshape(-1)
        if not (x.shape[0] == a.shape[0] == y.shape[0] == prob.shape[0]):
            raise ValueError("support arrays have mismatched lengths")
        if np.any(prob < 0):
            raise ValueError("negative probability in population")
        total = prob.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1 (tolerance 1e-12)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "prob", prob)

    def __len__(self) -> int:
        return self.prob.shape[0]

    def expect(self, values) -> float:
        return float(np.dot(self.prob, np.asarray(values, dtype=float)))

    def as_dataset(self, c_idx=(0,)) -> Dataset:
        return Dataset(self.x, self.a, self.y, c_idx)

    def x_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique support points of ``X`` and the group index of every atom."""
        ux, inverse = np.unique(self.x, axis=0, return_inverse=True)
        return ux, inverse.reshape(-1)

    def conditional_mean(self, values, mask=None) -> np.ndarray:
        """``E[values | X = x_i, mask]`` evaluated at every atom ``i``.

        Atoms whose ``x`` has zero conditioning mass get ``nan``.
        """
        values = np.asarray(values, dtype=float)
        w = self.prob if mask is None else self.prob * np.asarray(mask, dtype=float)
        _, g = self.x_groups()
        num = np.bincount(g, weights=w * values)
        den = np.bincount(g, weights=w)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = num / den
        return out[g]
