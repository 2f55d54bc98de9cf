"""Membership-score nearest-neighbour matching of auxiliary units to main units."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from ._accel import USE_NUMBA, njit


class MatchingError(ValueError):
    """Membership model cannot be fitted meaningfully."""


@dataclass
class MembershipScores:
    """Fitted membership logits (main units first)."""

    main_logit: np.ndarray
    aux_logit: np.ndarray
    coef: np.ndarray
    kept_columns: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return expit(np.concatenate([self.main_logit, self.aux_logit]))


@dataclass
class MatchResult:
    kept_aux_indices: np.ndarray
    pairs: np.ndarray  # (k, n) aux index matched to each main unit per pass; -1 if none
    membership_scores: np.ndarray
    ratio: int
    smd_before: np.ndarray = field(default_factory=lambda: np.zeros(0))
    smd_after: np.ndarray = field(default_factory=lambda: np.zeros(0))
    column_names: tuple = ()
    warnings: list = field(default_factory=list)


def fit_membership_scores(main_shared, aux_shared, max_iter: int = 100) -> MembershipScores:
    """Unpenalized logistic regression of membership (1 = main) on shared covariates.

    Constant columns are dropped; with none left the model is intercept-only
    and every unit gets the logit of ``n / N``.
    """
    A = np.atleast_2d(np.asarray(main_shared, dtype=float))
    B = np.atleast_2d(np.asarray(aux_shared, dtype=float))
    if A.shape[0] == 1 and A.shape[1] > 1 and np.asarray(main_shared).ndim == 1:
        A = A.T
    if B.shape[0] == 1 and B.shape[1] > 1 and np.asarray(aux_shared).ndim == 1:
        B = B.T
    if A.shape[1] != B.shape[1]:
        raise MatchingError("main and auxiliary shared covariates differ in column count")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise MatchingError("both datasets need at least one unit")
    X = np.vstack([A, B])
    r = np.concatenate([np.ones(A.shape[0]), np.zeros(B.shape[0])])
    sd = X.std(axis=0)
    kept = np.flatnonzero(sd > 1e-12 * np.maximum(1.0, np.abs(X.mean(axis=0))))
    mu = X[:, kept].mean(axis=0)
    D = np.column_stack([np.ones(X.shape[0]), (X[:, kept] - mu) / sd[kept]])
    beta = np.zeros(D.shape[1])
    beta[0] = np.log(A.shape[0] / B.shape[0])
    for _ in range(max_iter):
        eta = D @ beta
        p = expit(eta)
        grad = D.T @ (r - p)
        w = p * (1 - p)
        H = (D * w[:, None]).T @ D
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(D.shape[1]), grad)
        except np.linalg.LinAlgError as exc:
            raise MatchingError("membership model is singular") from exc
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
        if np.max(np.abs(beta[1:]), initial=0.0) > 50:
            break
    eta = D @ beta
    if np.max(np.abs(beta[1:]), initial=0.0) > 50 or np.all((eta > 0) == (r > 0)):
        raise MatchingError("shared covariates separate main from auxiliary units; "
                            "matching on these scores is meaningless")
    return MembershipScores(eta[:A.shape[0]], eta[A.shape[0]:], beta, kept)


@njit
def _greedy_nb(ms, av, orders, caliper):
    k, n = orders.shape
    used = np.zeros(av.shape[0], dtype=np.bool_)
    pairs = -np.ones((k, n), dtype=np.int64)
    for t in range(k):
        for s in range(n):
            i = orders[t, s]
            best = -1
            bd = np.inf
            for j in range(av.shape[0]):
                if not used[j]:
                    d = abs(av[j] - ms[i])
                    if d < bd:
                        bd = d
                        best = j
            if best >= 0 and bd <= caliper:
                used[best] = True
                pairs[t, i] = best
    return pairs


def _greedy_np(ms, av, orders, caliper):
    k, n = orders.shape
    dist_used = np.zeros(av.shape[0])
    pairs = -np.ones((k, n), dtype=np.int64)
    for t in range(k):
        for i in orders[t]:
            d = np.abs(av - ms[i]) + dist_used
            best = int(np.argmin(d)) if d.size else -1
            if best >= 0 and np.isfinite(d[best]) and d[best] <= caliper:
                dist_used[best] = np.inf
                pairs[t, i] = best
    return pairs


def standardized_mean_differences(A, B) -> np.ndarray:
    """``(mean_A - mean_B) / sqrt((var_A + var_B) / 2)`` per column (0 when both constant)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    diff = A.mean(axis=0) - B.mean(axis=0)
    pooled = np.sqrt(0.5 * (A.var(axis=0, ddof=1) + B.var(axis=0, ddof=1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pooled > 0, diff / pooled, 0.0)


def nn_match(main_scores, aux_scores, k: int, seed=0, caliper: Optional[float] = None,
             use_numba: Optional[bool] = None) -> MatchResult:
    """Greedy nearest-neighbour matching without replacement on logit scores.

    Runs ``k`` passes; each visits the main units in a seeded random order
    and assigns the closest unused auxiliary unit (lowest index on ties).
    """
    ms = np.ascontiguousarray(main_scores, dtype=float)
    av = np.ascontiguousarray(aux_scores, dtype=float)
    if k < 1:
        raise ValueError("matching ratio must be >= 1")
    n = ms.shape[0]
    rng = np.random.default_rng([int(seed), 0x4D41])
    orders = np.vstack([rng.permutation(n) for _ in range(k)]) if n else \
        np.zeros((k, 0), dtype=np.int64)
    cal = np.inf if caliper is None else float(caliper)
    fn = _greedy_nb if (USE_NUMBA if use_numba is None else use_numba) else _greedy_np
    pairs = fn(ms, av, orders.astype(np.int64), cal)
    notes = []
    if av.shape[0] < k * n:
        msg = (f"only {av.shape[0]} auxiliary units for {k} x {n} requested matches; "
               "matching is partial")
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    kept = np.sort(pairs[pairs >= 0])
    scores = expit(np.concatenate([ms, av]))
    return MatchResult(kept, pairs, scores, int(k), warnings=notes)


def match_aux(main_shared, aux_shared, k: int, seed=0, caliper: Optional[float] = None,
              column_names=()) -> MatchResult:
    """Fit membership scores, match, and report balance before and after."""
    A = np.asarray(main_shared, dtype=float)
    B = np.asarray(aux_shared, dtype=float)
    if A.ndim == 1:
        A, B = A[:, None], B[:, None]
    ms = fit_membership_scores(A, B)
    res = nn_match(ms.main_logit, ms.aux_logit, k, seed, caliper)
    res.smd_before = standardized_mean_differences(A, B)
    res.smd_after = standardized_mean_differences(A, B[res.kept_aux_indices]) \
        if res.kept_aux_indices.size > 1 else np.full(A.shape[1], np.nan)
    res.column_names = tuple(column_names) or tuple(f"c{j + 1}" for j in range(A.shape[1]))
    return res
