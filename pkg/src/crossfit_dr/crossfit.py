"""Fold assignment, role rotation and averaging of per-rotation estimates.

Roles: ``gamma`` trains ``gamma_hat``, ``alpha`` trains ``alpha_tilde`` and
``eval`` hosts the second-stage regression.

* ``three_way``: three folds; rotation ``r`` uses folds
  ``(r, r+1, r+2) mod 3`` for ``(gamma, alpha, eval)``; optionally all six
  permutations.
* ``two_way``: two folds; both nuisances on fold ``r``, evaluation on ``1-r``.
* ``none``: every role uses the full sample.

Iterations beyond the number of rotations draw a fresh fold assignment.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .estimands import LinearFunctional, get_functional
from .nuisance import (
    SplitGrams,
    SplitTag,
    StabilityDiagnostics,
    diagnostics as stability_diagnostics,
    fit_alpha,
    fit_gamma,
)
from .second_stage import (
    PseudoOutcomeModel,
    fit_theta,
    pseudo_outcome_values,
    target_coefficients,
)
from .spline_basis import BasisSpec, GramMatrix, SingularGramError, SplineBasis

SCHEME_KINDS = ("none", "two_way", "three_way")
SCHEME_ALIASES = {"none": "none", "2way": "two_way", "two_way": "two_way",
                  "3way": "three_way", "three_way": "three_way"}
_N_FOLDS = {"none": 1, "two_way": 2, "three_way": 3}
_SPLIT_STREAM = 0x5EED


@dataclass(frozen=True)
class CrossFitScheme:
    """How the sample is split and how often roles are rotated.

    ``iterations`` defaults to one pass over all rotations of one split.
    """

    kind: str = "three_way"
    iterations: int | None = None
    seed: int = 0
    all_permutations: bool = False
    combine: str = "mean"

    def __post_init__(self):
        kind = SCHEME_ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {sorted(SCHEME_ALIASES)}")
        object.__setattr__(self, "kind", kind)
        if self.iterations is not None and int(self.iterations) < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.combine not in ("mean", "median"):
            raise ValueError(f"combine must be 'mean' or 'median', got {self.combine!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def n_folds(self) -> int:
        return _N_FOLDS[self.kind]

    def rotations(self) -> list[tuple[int, int, int]]:
        """``(gamma_fold, alpha_fold, eval_fold)`` per rotation."""
        if self.kind == "none":
            return [(0, 0, 0)]
        if self.kind == "two_way":
            return [(0, 0, 1), (1, 1, 0)]
        if self.all_permutations:
            return list(itertools.permutations(range(3)))
        return [(r, (r + 1) % 3, (r + 2) % 3) for r in range(3)]

    @property
    def n_iterations(self) -> int:
        return len(self.rotations()) if self.iterations is None else int(self.iterations)


def split(n_total: int, scheme: CrossFitScheme, repeat: int = 0) -> np.ndarray:
    """Fold label of every row: a seeded permutation dealt round-robin.

    Fold sizes differ by at most one.
    """
    k = scheme.n_folds
    if n_total < k:
        raise ValueError(f"{n_total} rows cannot fill {k} folds")
    if k == 1:
        return np.zeros(n_total, dtype=np.int64)
    ss = np.random.SeedSequence([int(scheme.seed), int(repeat), _SPLIT_STREAM])
    perm = np.random.Generator(np.random.Philox(ss)).permutation(n_total)
    labels = np.empty(n_total, dtype=np.int64)
    labels[perm] = np.arange(n_total) % k
    return labels


@dataclass
class CrossFitEstimate:
    """Per-target estimates combined over iterations."""

    theta: np.ndarray
    per_iteration: np.ndarray
    scheme: CrossFitScheme
    targets: np.ndarray
    diagnostics: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    no_support: np.ndarray | None = None
    oracle: np.ndarray | None = None
    oracle_per_iteration: np.ndarray | None = None


def _as_basis(spec_or_basis):
    if isinstance(spec_or_basis, BasisSpec):
        return SplineBasis(spec_or_basis)
    return spec_or_basis


def _components(fun) -> list[tuple[float, LinearFunctional]]:
    """Signed components of the estimand; ``cate`` is ``trt - ctrl``."""
    if isinstance(fun, str):
        if fun == "cate":
            return [(1.0, get_functional("trt")), (-1.0, get_functional("ctrl"))]
        return [(1.0, get_functional(fun))]
    return [(1.0, fun)]


def _combine(values: np.ndarray, how: str) -> np.ndarray:
    return np.median(values, axis=0) if how == "median" else values.mean(axis=0)


def _annotate(exc: Exception, note: str) -> Exception:
    msg = f"{exc} [{note}]"
    try:
        new = type(exc)(msg)
    except Exception:
        new = RuntimeError(msg)
    new.__cause__ = exc
    return new


def _reference_whitener(q_basis, fun, dataset, reference_gram):
    if reference_gram is None:
        J = fun.j(dataset.a)
        ref = q_basis.design(dataset.x).gram(J)
    elif isinstance(reference_gram, dict):
        ref = reference_gram[fun.name]
    else:
        ref = reference_gram
    return q_basis.whiten(ref)


def _diagnose(q_basis, b_basis, fun, parts, weights_eval, whitener, b_whitener) -> StabilityDiagnostics:
    gamma_data, alpha_data, eval_data = parts
    s_hat = q_basis.design(gamma_data.x).gram(fun.j(gamma_data.a))
    s_tilde = q_basis.design(alpha_data.x).gram(fun.j(alpha_data.a))
    d_eval = q_basis.design(eval_data.x)
    J = fun.j(eval_data.a)
    s_bar = d_eval.gram(J)
    # target-weighted Gram; p.s.d. must hold for every target
    psd_all = True
    weighted = None
    for w in weights_eval.T:
        weighted = d_eval.gram(J * w)
        psd_all &= weighted.is_psd()
    b_bar = b_basis.design(eval_data.c).gram()
    out = stability_diagnostics(SplitGrams(s_hat, s_tilde, s_bar, weighted, b_bar), whitener, b_whitener)
    out.weighted_psd = bool(psd_all)
    return out


def run(dataset: Dataset, fun, q_spec, b_spec, scheme: CrossFitScheme, targets,
        truth=None, diagnostics: bool = False, folds=None,
        reference_gram: GramMatrix | dict | None = None,
        b_reference_gram: GramMatrix | None = None) -> CrossFitEstimate:
    """Cross-fitted estimate of ``theta(c)`` at each target.

    Parameters
    ----------
    dataset : Dataset
    fun : LinearFunctional or str
        A built-in name, ``"cate"`` or a functional.
    q_spec, b_spec : BasisSpec or basis
        Nuisance basis on ``X`` and second-stage basis on ``C``.
    scheme : CrossFitScheme
    targets : array_like
        Target points ``c`` (one row each).
    truth : object, optional
        Provides ``gamma0(fun)`` and ``alpha0(fun)`` callables; enables the
        oracle estimate on the same evaluation folds.
    diagnostics : bool
        Compute stability indicators per iteration.
    folds : array_like of int, optional
        Explicit fold labels for the first split (overrides the seed).
    reference_gram, b_reference_gram : GramMatrix, optional
        Whitening references; pooled empirical Grams by default.
    """
    q_basis = _as_basis(q_spec)
    b_basis = _as_basis(b_spec)
    comps = _components(fun)
    for _, f in comps:
        f.validate(dataset.a)
    n = len(dataset)
    rotations = scheme.rotations()
    n_rot = len(rotations)
    n_iter = scheme.n_iterations
    targets = np.asarray(targets, dtype=float)

    whiteners = {}
    b_whitener = None
    if diagnostics:
        for _, f in comps:
            try:
                whiteners[f.name] = _reference_whitener(q_basis, f, dataset, reference_gram)
            except SingularGramError:
                whiteners[f.name] = None
        b_ref = b_reference_gram if b_reference_gram is not None else b_basis.design(dataset.c).gram()
        try:
            b_whitener = b_basis.whiten(b_ref)
        except SingularGramError:
            b_whitener = None

    per_iter, oracle_iter, diag_list, flags = [], [], [], []
    no_support_any = None
    labels = None
    for it in range(n_iter):
        repeat, r = divmod(it, n_rot)
        if r == 0 or labels is None:
            if folds is not None and repeat == 0:
                labels = np.asarray(folds, dtype=np.int64)
                if labels.shape != (n,) or set(np.unique(labels)) - set(range(scheme.n_folds)):
                    raise ValueError("explicit folds must label every row with 0..n_folds-1")
            else:
                labels = split(n, scheme, repeat)
        g_fold, a_fold, e_fold = rotations[r]
        note = (f"scheme {scheme.kind}, iteration {it}, rotation {r}, split {repeat}: "
                f"gamma fold {g_fold}, alpha fold {a_fold}, eval fold {e_fold}")
        if scheme.kind == "none":
            parts = (dataset, dataset, dataset)
            tags = (SplitTag("gamma"), SplitTag("alpha"), SplitTag("eval"))
        else:
            parts = tuple(dataset.subset(np.flatnonzero(labels == k)) for k in (g_fold, a_fold, e_fold))
            tags = (SplitTag("gamma", g_fold), SplitTag("alpha", a_fold), SplitTag("eval", e_fold))
        gamma_data, alpha_data, eval_data = parts
        try:
            f_hat = np.zeros(len(eval_data))
            f_or = np.zeros(len(eval_data)) if truth is not None else None
            flag_rows = np.zeros(len(eval_data), dtype=bool)
            for sign, f in comps:
                g = fit_gamma(gamma_data, f, q_basis, tags[0])
                a = fit_alpha(alpha_data, f, q_basis, tags[1])
                vals, fl = PseudoOutcomeModel(g, a, f).values(eval_data)
                f_hat += sign * vals
                flag_rows |= fl
                if truth is not None:
                    f_or += sign * pseudo_outcome_values(f, eval_data, truth.gamma0(f), truth.alpha0(f))
            fit, theta = fit_theta(f_hat, b_basis, eval_data.c, targets, eval_split=tags[2],
                                   nuisance_splits=tags[:2], allow_overlap=scheme.kind == "none")
            if truth is not None:
                _, th_or = fit_theta(f_or, b_basis, eval_data.c, targets, allow_overlap=True,
                                     check_paths=False)
                oracle_iter.append(th_or)
            if diagnostics:
                d_eval = b_basis.design(eval_data.c)
                u, _, _ = target_coefficients(b_basis, fit.gram, fit.targets)
                w_eval = d_eval.dense() @ u.T
                diag = {}
                for _, f in comps:
                    if whiteners[f.name] is None:
                        diag[f.name] = None
                        continue
                    diag[f.name] = _diagnose(q_basis, b_basis, f, parts, w_eval,
                                             whiteners[f.name], b_whitener)
                diag_list.append(diag)
        except Exception as exc:
            raise _annotate(exc, note) from exc
        per_iter.append(theta)
        no_support_any = fit.no_support if no_support_any is None else (no_support_any | fit.no_support)
        flags.append({"iteration": it, "flagged_eval_rows": int(flag_rows.sum()),
                      "no_support_targets": np.flatnonzero(fit.no_support).tolist()})

    per_iter = np.array(per_iter)
    est = CrossFitEstimate(
        theta=_combine(per_iter, scheme.combine), per_iteration=per_iter, scheme=scheme,
        targets=fit.targets, diagnostics=diag_list, flags=flags, no_support=no_support_any)
    if truth is not None:
        est.oracle_per_iteration = np.array(oracle_iter)
        est.oracle = _combine(est.oracle_per_iteration, scheme.combine)
    return est
