"""Empirical-likelihood weights via Newton's method on the dual.

Maximizes ``sum(log w)`` subject to ``w > 0``, ``sum(w) = T`` and
``sum(w_i * G_i) = 0``. The optimum has the form

    w_i = (T / m) / (1 + lam' G_i)

where ``lam`` minimizes the convex dual ``-sum(log*(1 + lam' G_i))``. ``log*``
agrees with ``log`` above ``1/m`` and continues quadratically below it, so the
dual is finite everywhere and plain damped Newton applies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS = np.finfo(float).eps
# relative tolerance on the weight total required for convergence
SUM_TOL = 1e-9


class ELError(RuntimeError):
    """Base class for empirical-likelihood solver failures."""


class ConvexHullViolation(ELError):
    """Zero is not interior to the convex hull of the constraint rows."""


class RankDeficiency(ELError):
    """Constraint columns are (numerically) linearly dependent."""


@dataclass(frozen=True)
class ELSolution:
    weights: np.ndarray
    dual: np.ndarray
    iterations: int
    converged: bool
    max_constraint_violation: float


def _logstar(z, thresh):
    """Values, first and second derivatives of the log* extension."""
    lo = z < thresh
    zc = np.where(lo, thresh, z)
    val = np.log(zc)
    d1 = 1.0 / zc
    d2 = -1.0 / (zc * zc)
    if lo.any():
        t = z[lo] / thresh
        val[lo] = np.log(thresh) - 1.5 + 2.0 * t - 0.5 * t * t
        d1[lo] = (2.0 - t) / thresh
        d2[lo] = -1.0 / (thresh * thresh)
    return val, d1, d2


def drop_collinear_columns(G, rel_tol: float = 1e-12):
    """Greedy Gram-Schmidt column filter.

    Columns are visited left to right and kept when their component orthogonal
    to the constant vector and to the already-kept columns exceeds ``rel_tol``
    times the column norm. The constant vector is part of the basis because
    the total-mass constraint already pins ``sum(w)``; a constant column adds
    either nothing or an infeasible constraint.

    Returns ``(G[:, kept], kept)``.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    m, q = G.shape
    basis = [np.full(m, 1.0 / np.sqrt(m))]
    kept = []
    for j in range(q):
        col = G[:, j]
        norm0 = np.linalg.norm(col)
        if norm0 == 0.0 or not np.isfinite(norm0):
            continue
        r = col.copy()
        for _ in range(2):
            for b in basis:
                r -= (b @ r) * b
        rn = np.linalg.norm(r)
        if rn > rel_tol * norm0:
            basis.append(r / rn)
            kept.append(j)
    kept = np.asarray(kept, dtype=np.int64)
    return G[:, kept], kept


def solve_el(G, total: float = 1.0, tol: float = 1e-10, max_iter: int = 200,
             max_halvings: int = 30) -> ELSolution:
    """Solve for positive EL weights summing to ``total`` with ``sum w_i G_i = 0``.

    Parameters
    ----------
    G : (m, q) array
        Constraint rows. All-zero columns are inactive (dual entry 0).
    total : float
        Required weight total ``T``.
    tol : float
        Convergence threshold on ``max|sum_i w_i G_i|``. It is raised to the
        floating-point floor ``16 eps T max|G| sqrt(m)`` when that is larger.

    Raises
    ------
    ConvexHullViolation
        When the dual diverges or the moment residual stays above 1e-6.
    RankDeficiency
        When the active columns are collinear or ``q >= m``.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.ndim != 2 or G.shape[0] < 1:
        raise ValueError("G must be a non-empty (m, q) matrix")
    if not np.all(np.isfinite(G)):
        raise ValueError("G contains non-finite entries")
    if not total > 0:
        raise ValueError("total must be positive")
    m, q = G.shape
    T = float(total)
    dual = np.zeros(q)
    active = np.flatnonzero(np.any(G != 0.0, axis=0))
    if active.size == 0:
        return ELSolution(np.full(m, T / m), dual, 1, True, 0.0)
    Ga = G[:, active]
    qa = Ga.shape[1]
    if qa >= m:
        raise RankDeficiency(f"{qa} active constraints for {m} units")
    scale = np.max(np.abs(Ga), axis=0)
    Gs = Ga / scale
    sv = np.linalg.svd(Gs, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise RankDeficiency("constraint columns are collinear "
                             f"(singular value ratio {sv[-1] / sv[0]:.2e})")

    thresh = 1.0 / m
    floor = 16.0 * _EPS * T * float(np.max(np.abs(Ga))) * np.sqrt(m)
    tol_eff = max(tol, floor)

    def objective(lam):
        val, d1, d2 = _logstar(1.0 + Gs @ lam, thresh)
        return -val.sum(), d1, d2

    def rounding(lam):
        # floating-point uncertainty of the summed objective
        val, _, _ = _logstar(1.0 + Gs @ lam, thresh)
        return 8 * _EPS * (np.abs(val).sum() + m)

    lam = np.zeros(qa)
    f, d1, d2 = objective(lam)
    converged = False
    viol = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        z = 1.0 + Gs @ lam
        if np.all(z > 0):
            w = (T / m) / z
            viol = float(np.max(np.abs(Ga.T @ w)))
            # outside the hull the weights all shrink towards zero, which also
            # drives the moment residual down; the total separates the two
            if viol <= tol_eff and np.all(z >= thresh * (1 - 1e-12)) and \
                    abs(w.sum() - T) <= SUM_TOL * T:
                converged = True
                break
        grad = -(Gs.T @ d1)
        hess = (Gs * (-d2)[:, None]).T @ Gs
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiency("singular dual Hessian") from exc
        gnorm = np.max(np.abs(grad))
        fuzz = rounding(lam)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = lam + t * step
            fc, d1c, d2c = objective(cand)
            if fc < f:
                break
            # near the optimum the decrease drops below rounding; fall back to
            # gradient reduction
            if fc <= f + fuzz and np.max(np.abs(Gs.T @ d1c)) < gnorm:
                break
            t *= 0.5
        else:
            break
        lam, f, d1, d2 = cand, fc, d1c, d2c
        if np.max(np.abs(lam)) > 1e10:
            raise ConvexHullViolation(
                "dual multipliers diverged; zero lies outside the convex hull "
                "of the constraint rows")

    z = 1.0 + Gs @ lam
    if not np.all(z > 0):
        raise ConvexHullViolation("weights not positive at termination")
    w = (T / m) / z
    viol = float(np.max(np.abs(Ga.T @ w)))
    if not converged:
        if viol > 1e-6 * max(1.0, T * float(np.max(np.abs(Ga)))):
            raise ConvexHullViolation(
                f"moment residual {viol:.3e} after {it} iterations")
        if abs(w.sum() - T) > 1e-6 * T:
            raise ConvexHullViolation(
                f"weights total {w.sum():.3e} instead of {T:.3e}; zero lies outside "
                "the convex hull of the constraint rows")
    dual[active] = lam / scale
    return ELSolution(w, dual, it, converged, viol)
