"""Point estimators, integration scores, cross-fitting and bootstrap inference.

Level-specific quantities are computed on one evaluation half at a time from a
``CandidatePredictions`` object; ``cross_fit_estimate`` runs both halves and
averages.
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data import (AuxDataset, LearnerKind, MainDataset, StudyConfig, ValidationError,
                   WorkingFunction, FAMILY_TAG)
from .el import ConvexHullViolation, ELError, ELSolution, drop_collinear_columns, solve_el
from .learners import CandidatePredictions, LearnerError, assemble_candidates

Z_975 = float(norm.ppf(0.975))
CERTIFICATE_TOL = 1e-6
COLLINEAR_TOL = 1e-8
MAX_BOOT_FAILURE_RATE = 0.10


class EstimationError(ELError):
    """EL step failed inside an estimator; message carries level/half context."""


@dataclass
class LevelEstimate:
    level: int
    method: str
    tau_hat: float
    bsd: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    p_value: Optional[float] = None
    n_eff: float = float("nan")
    half_estimates: tuple = ()


@dataclass
class IntegrationResult:
    theta_hat: np.ndarray
    scores: np.ndarray
    dual: np.ndarray
    iterations: int
    violation: float
    kept_columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class InfluenceOracle:
    f: np.ndarray
    sigma2: float


@dataclass
class CrossFitResult:
    estimates: list
    integration: IntegrationResult
    rho_hat: float
    n: int
    N: int
    chosen: dict
    failures: dict = field(default_factory=dict)

    def get(self, level: int, method: str) -> LevelEstimate:
        for e in self.estimates:
            if e.level == level and e.method == method:
                return e
        raise KeyError((level, method))

    @property
    def methods(self) -> tuple:
        return tuple(dict.fromkeys(e.method for e in self.estimates))


@dataclass
class BootstrapSummary:
    replicates: np.ndarray  # (B, n_estimates), NaN where a replicate failed
    n_failed: np.ndarray  # failures per estimate column
    unreliable: bool
    messages: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# single-half building blocks
# ---------------------------------------------------------------------------


def raw_mean(main: MainDataset, x: int, rows=None) -> LevelEstimate:
    y, xv = (main.y, main.x) if rows is None else (main.y[rows], main.x[rows])
    grp = y[xv == x]
    if grp.size == 0:
        raise ValidationError(f"exposure level {x} has no units")
    return LevelEstimate(x, "Raw", float(grp.mean()), n_eff=float(grp.size))


def aiptw_value(y, is_x, pi, mu) -> float:
    """Mean of ``I/pi * y - (I - pi)/pi * mu`` over all units."""
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    ind = np.asarray(is_x, dtype=float)
    return float(np.mean(ind / pi * y - (ind - pi) / pi * mu))


def aiptw(main: MainDataset, preds: CandidatePredictions, x: int, j_ps: int = 0,
          j_cm: int = 0, method: str = "AIPTW") -> LevelEstimate:
    rows = preds.eval_idx
    val = aiptw_value(main.y[rows], main.x[rows] == x, preds.ps[x][:, j_ps],
                      preds.cm[x][:, j_cm])
    return LevelEstimate(x, method, val)


def _group(main, preds, x):
    return np.flatnonzero(main.x[preds.eval_idx] == x)


def build_g(preds: CandidatePredictions, x: int, group_idx, all_idx=None) -> np.ndarray:
    """Calibration rows for the units in ``group_idx``.

    Candidate columns are centered by their means over ``all_idx`` (default:
    every unit of the evaluation half). Indices are positions within the half.
    """
    sel = slice(None) if all_idx is None else np.asarray(all_idx, dtype=np.int64)
    P, M = preds.ps[x], preds.cm[x]
    C = np.column_stack([P - P[sel].mean(axis=0), M - M[sel].mean(axis=0)])
    return C[np.asarray(group_idx, dtype=np.int64)]


def build_g_star(preds: CandidatePredictions, scores, x: int, group_idx,
                 all_idx=None) -> np.ndarray:
    """Score-adjusted calibration rows.

    PS columns equal those of ``build_g``; CM column ``j`` becomes
    ``p_i mu_ij - mean(p mu_j) + (1 - p_i) eta_j`` with ``eta_j = mean(mu_j)``.
    ``scores`` are aligned with the evaluation half.
    """
    p = np.asarray(scores, dtype=float)
    P, M = preds.ps[x], preds.cm[x]
    sel = slice(None) if all_idx is None else np.asarray(all_idx, dtype=np.int64)
    eta = M[sel].mean(axis=0)
    pm = p[:, None] * M
    cm_cols = pm - pm[sel].mean(axis=0) + (1.0 - p)[:, None] * eta
    C = np.column_stack([P - P[sel].mean(axis=0), cm_cols])
    return C[np.asarray(group_idx, dtype=np.int64)]


def _el_weights(G, config: StudyConfig, context: str) -> ELSolution:
    Gf, _ = drop_collinear_columns(G, COLLINEAR_TOL)
    if Gf.shape[1] == 0:
        Gf = np.zeros((G.shape[0], 1))
    try:
        sol = solve_el(Gf, 1.0, tol=config.el_tolerance, max_iter=config.el_max_iter)
    except ELError as exc:
        raise type(exc)(f"{context}: {exc}") from exc
    cert = float(np.max(np.abs(Gf.T @ sol.weights))) if Gf.size else 0.0
    if cert > CERTIFICATE_TOL:
        raise ConvexHullViolation(f"{context}: moment certificate {cert:.3e} exceeds "
                                  f"{CERTIFICATE_TOL}")
    return sol


def cml(main: MainDataset, preds: CandidatePredictions, x: int,
        config: Optional[StudyConfig] = None, context: str = "") -> LevelEstimate:
    config = config or StudyConfig()
    grp = _group(main, preds, x)
    sol = _el_weights(build_g(preds, x, grp), config, f"CML level {x}{context}")
    # renormalize so the estimate is an exact convex combination despite
    # the solver's finite tolerance on the sum constraint
    w = sol.weights / sol.weights.sum()
    y = main.y[preds.eval_idx[grp]]
    return LevelEstimate(x, "CML", float(w @ y), n_eff=float(1.0 / np.sum(w * w)))


def cmlib(main: MainDataset, aux: AuxDataset, preds: CandidatePredictions, scores, x: int,
          config: Optional[StudyConfig] = None, context: str = "") -> LevelEstimate:
    """``sum(p w* y) / sum(p w*)`` over the level group.

    ``scores`` holds the integration scores of the evaluation-half units.
    When every score is exactly one the score-adjusted constraints coincide
    with the plain ones and the CML value is returned unchanged.
    """
    config = config or StudyConfig()
    p = np.asarray(scores, dtype=float)
    if np.all(p == 1.0):
        est = cml(main, preds, x, config, context)
        return dataclasses.replace(est, method="CMLIB")
    grp = _group(main, preds, x)
    sol = _el_weights(build_g_star(preds, p, x, grp), config, f"CMLIB level {x}{context}")
    pw = p[grp] * sol.weights
    y = main.y[preds.eval_idx[grp]]
    wn = pw / pw.sum()
    return LevelEstimate(x, "CMLIB", float(pw @ y / pw.sum()),
                         n_eff=float(1.0 / np.sum(wn * wn)))


# ---------------------------------------------------------------------------
# integration scores
# ---------------------------------------------------------------------------


def _design(x, n_levels):
    x = np.asarray(x, dtype=np.int64)
    if n_levels <= 2:
        return np.column_stack([np.ones(x.size), x.astype(float)])
    return np.column_stack([np.ones(x.size)] + [(x == l).astype(float)
                                                for l in range(1, n_levels)])


def _pooled(main, aux):
    return np.concatenate([main.y, aux.y]), np.concatenate([main.x, aux.x])


def integration_theta(main: MainDataset, aux: AuxDataset, form=WorkingFunction.FORM_I):
    """Root of the pooled working estimating equation."""
    form = WorkingFunction(form)
    y, x = _pooled(main, aux)
    if y.size < 2:
        raise ValidationError("integration needs at least two pooled units")
    if form is WorkingFunction.FORM_I:
        return np.array([y.mean()])
    D = _design(x, main.n_levels)
    if np.linalg.matrix_rank(D) < D.shape[1]:
        from .el import RankDeficiency
        raise RankDeficiency("Form II design (1, X) is rank deficient on pooled data")
    return np.linalg.lstsq(D, y, rcond=None)[0]


def integration_h(y, x, theta, form, n_levels):
    form = WorkingFunction(form)
    if form is WorkingFunction.FORM_I:
        return (y - theta[0])[:, None]
    D = _design(x, n_levels)
    return D * (y - D @ theta)[:, None]


def integration_scores(main: MainDataset, aux: AuxDataset, theta_hat=None,
                       form=WorkingFunction.FORM_I,
                       config: Optional[StudyConfig] = None) -> IntegrationResult:
    """EL scores over the pooled units (main first) with total ``N``."""
    config = config or StudyConfig()
    form = WorkingFunction(form)
    if theta_hat is None:
        theta_hat = integration_theta(main, aux, form)
    theta_hat = np.asarray(theta_hat, dtype=float)
    N = main.n + aux.size
    if aux.size == 0:
        return IntegrationResult(theta_hat, np.ones(N), np.zeros(0), 0, 0.0)
    y, x = _pooled(main, aux)
    h = integration_h(y, x, theta_hat, form, main.n_levels)
    R = np.zeros(N)
    R[:main.n] = 1.0
    H = np.column_stack([R[:, None] * h, (1.0 - R)[:, None] * h])
    Hf, kept = drop_collinear_columns(H, COLLINEAR_TOL)
    if Hf.shape[1] == 0:
        return IntegrationResult(theta_hat, np.ones(N), np.zeros(0), 0, 0.0, kept)
    try:
        sol = solve_el(Hf, float(N), tol=config.el_tolerance, max_iter=config.el_max_iter)
    except ConvexHullViolation as exc:
        raise ConvexHullViolation(
            f"auxiliary data incompatible with main data moments ({exc})") from exc
    scale = max(1.0, float(np.max(np.abs(Hf))))
    cert = float(np.max(np.abs(Hf.T @ sol.weights))) / scale
    if cert > CERTIFICATE_TOL:
        raise ConvexHullViolation(f"integration moment certificate {cert:.3e} too large")
    dual = np.zeros(H.shape[1])
    dual[kept] = sol.dual
    return IntegrationResult(theta_hat, sol.weights, dual, sol.iterations,
                             sol.max_constraint_violation, kept)


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------


def split_halves(x, seed):
    """Seeded two-way split stratified by exposure level."""
    x = np.asarray(x)
    rng = np.random.default_rng([int(seed), 0x5EED])
    a, b = [], []
    for lvl in np.unique(x):
        rows = np.flatnonzero(x == lvl)
        rows = rows[rng.permutation(rows.size)]
        h = rows.size // 2
        a.append(rows[:h])
        b.append(rows[h:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def aiptw_pairs(config: StudyConfig):
    """(method tag, PS index, CM index) for each PS candidate with a same-family CM."""
    out = []
    used = {}
    for j, ps in enumerate(config.ps_candidates):
        for k, cm in enumerate(config.cm_candidates):
            if FAMILY_TAG[ps.kind] == FAMILY_TAG[cm.kind]:
                tag = f"AIPTW.{FAMILY_TAG[ps.kind]}"
                used[tag] = used.get(tag, 0) + 1
                if used[tag] > 1:
                    tag = f"{tag}{used[tag]}"
                out.append((tag, j, k))
                break
    return out


def method_names(config: StudyConfig) -> tuple:
    return ("Raw", *(t for t, _, _ in aiptw_pairs(config)), "CML", "CMLIB")


def _half_estimates(main, config, preds, scores_half, half, strict, failures):
    """Per-level estimates on one evaluation half.

    ``scores_half`` maps each CMLIB method name to the evaluation-half
    integration scores (``None`` when the scores could not be computed).
    """
    out = {}
    ctx = f", half {half + 1}"
    for x in range(main.n_levels):
        out[(x, "Raw")] = (raw_mean(main, x, preds.eval_idx).tau_hat, np.nan)
        for tag, j, k in aiptw_pairs(config):
            out[(x, tag)] = (aiptw(main, preds, x, j, k).tau_hat, np.nan)
        jobs = [("CML", lambda: cml(main, preds, x, config, ctx))]
        for name, sc in scores_half.items():
            if sc is None:
                out[(x, name)] = (np.nan, np.nan)
                continue
            jobs.append((name, lambda sc=sc: cmlib(main, None, preds, sc, x, config, ctx)))
        for name, fn in jobs:
            try:
                e = fn()
                out[(x, name)] = (e.tau_hat, e.n_eff)
            except ELError as exc:
                if strict:
                    raise
                failures[(x, name)] = str(exc)
                out[(x, name)] = (np.nan, np.nan)
    return out


def cross_fit_estimate(main: MainDataset, aux: Optional[AuxDataset], config: StudyConfig,
                       *, frozen: Optional[dict] = None, strict: bool = True,
                       aux_variants: Optional[dict] = None) -> CrossFitResult:
    """Two-fold cross-fitted Raw, AIPTW, CML and CMLIB estimates for every level.

    Integration scores are computed once on the full main + auxiliary data.
    ``frozen`` maps each half (0, 1) to learner selections from an earlier
    run. With ``strict=False`` an EL failure marks only the affected
    method as NaN and is logged in ``failures``. Each entry of
    ``aux_variants`` (name -> AuxDataset) adds a method ``CMLIB.<name>``
    that reuses the same candidate predictions with its own scores.
    """
    aux = aux if aux is not None else AuxDataset.empty()
    frozen = frozen or {}
    failures = {}
    sources = {"CMLIB": aux}
    sources.update({f"CMLIB.{k}": v for k, v in (aux_variants or {}).items()})
    integs = {}
    for name, a in sources.items():
        try:
            integs[name] = integration_scores(main, a, form=config.working_function,
                                              config=config)
        except ELError as exc:
            if strict:
                raise
            failures[(-1, name)] = str(exc)
            integs[name] = None
    halves = split_halves(main.x, config.seed)
    per_half = []
    chosen = {}
    for h in (0, 1):
        ev, tr = halves[h], halves[1 - h]
        preds = assemble_candidates(main, config, tr, ev, config.seed, half=h,
                                    frozen=frozen.get(h))
        chosen[h] = preds.chosen
        scores_half = {k: (None if v is None else v.scores[ev]) for k, v in integs.items()}
        per_half.append(_half_estimates(main, config, preds, scores_half, h, strict,
                                        failures))
    estimates = []
    names = (*method_names(config), *list(sources)[1:])
    for x in range(main.n_levels):
        for name in names:
            (t0, e0), (t1, e1) = per_half[0][(x, name)], per_half[1][(x, name)]
            is_el = name == "CML" or name.startswith("CMLIB")
            estimates.append(LevelEstimate(
                x, name, 0.5 * (t0 + t1),
                n_eff=float(e0 + e1) if is_el else float(np.sum(main.x == x)),
                half_estimates=(t0, t1)))
    integ = integs["CMLIB"]
    if integ is None:
        integ = IntegrationResult(np.zeros(0), np.full(main.n + aux.size, np.nan),
                                  np.zeros(0), 0, np.nan)
    N = main.n + aux.size
    return CrossFitResult(estimates, integ, 1.0 - main.n / N, main.n, N, chosen, failures)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def normal_ci(tau, bsd, z=Z_975):
    """Normal-approximation interval and two-sided p-value for ``tau = 0``."""
    lo, hi = tau - z * bsd, tau + z * bsd
    if bsd > 0:
        pval = float(2.0 * norm.sf(abs(tau) / bsd))
    else:
        pval = 1.0 if tau == 0 else 0.0
    return float(lo), float(hi), pval


def replicate_seed(seed: int, b: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xB007, int(b)]).generate_state(
        1, np.uint64)[0])


_WORKER_STATE = {}


def _init_worker(state):
    _WORKER_STATE.clear()
    _WORKER_STATE.update(state)


def _bootstrap_one(b):
    st = _WORKER_STATE
    main, aux, config, frozen = st["main"], st["aux"], st["config"], st["frozen"]
    keys = st["keys"]
    rng = np.random.default_rng(replicate_seed(config.seed, b))
    mi = rng.integers(0, main.n, main.n)
    ai = rng.integers(0, aux.size, aux.size) if aux.size else np.zeros(0, dtype=np.int64)
    variants = {}
    for name, v in st["variants"].items():
        variants[name] = v.subset(rng.integers(0, v.size, v.size))
    cfg = dataclasses.replace(config, seed=replicate_seed(config.seed, b))
    try:
        res = cross_fit_estimate(main.subset(mi), aux.subset(ai), cfg, frozen=frozen,
                                 strict=False, aux_variants=variants)
    except (ELError, LearnerError, ValidationError) as exc:
        return np.full(len(keys), np.nan), f"replicate {b}: {exc}"
    vals = np.array([res.get(lv, m).tau_hat for lv, m in keys])
    msg = "; ".join(f"replicate {b}: {v}" for v in res.failures.values()) or None
    return vals, msg


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None or threads == 0:
        env = os.environ.get("CALIBRA_THREADS", "").strip()
        threads = int(env) if env else 0
    if threads <= 0:
        threads = os.cpu_count() or 1
    return int(threads)


def run_ordered(fn, items, state, threads: int):
    """Map ``fn`` over ``items`` in worker processes; results keep item order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        # a serial map may run nested inside a worker (bootstrap inside a
        # Monte Carlo replicate), so the outer state is restored afterwards
        outer = dict(_WORKER_STATE)
        _init_worker(state)
        try:
            return [fn(i) for i in items]
        finally:
            _init_worker(outer)
    with ProcessPoolExecutor(max_workers=min(threads, len(items)),
                             initializer=_init_worker, initargs=(state,)) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


def bootstrap_inference(main: MainDataset, aux: Optional[AuxDataset], config: StudyConfig,
                        point: CrossFitResult, *, reps: Optional[int] = None,
                        threads: Optional[int] = 1, aux_variants: Optional[dict] = None):
    """Bootstrap SD, normal CI and p-value for every estimate in ``point``.

    Main and auxiliary rows are resampled independently. Learner tuning is
    frozen at the selections recorded in ``point.chosen``; integration scores
    and EL weights are re-estimated per replicate. Returns the augmented
    estimates and a ``BootstrapSummary``.
    """
    aux = aux if aux is not None else AuxDataset.empty()
    B = config.bootstrap_reps if reps is None else reps
    if B < 2:
        raise ValueError("bootstrap needs at least 2 replicates")
    keys = [(e.level, e.method) for e in point.estimates]
    state = {"main": main, "aux": aux, "config": config, "frozen": point.chosen,
             "keys": keys, "variants": dict(aux_variants or {})}
    out = run_ordered(_bootstrap_one, range(B), state, resolve_threads(threads))
    reps_mat = np.vstack([v for v, _ in out])
    messages = [m for _, m in out if m]
    n_failed = np.sum(np.isnan(reps_mat), axis=0)
    if np.all(n_failed == B):
        raise EstimationError("all bootstrap replicates failed")
    unreliable = bool(np.any(n_failed > MAX_BOOT_FAILURE_RATE * B))
    augmented = []
    for c, e in enumerate(point.estimates):
        col = reps_mat[:, c]
        col = col[np.isfinite(col)]
        if col.size >= 2 and np.isfinite(e.tau_hat):
            bsd = float(np.std(col, ddof=1))
            lo, hi, pv = normal_ci(e.tau_hat, bsd)
            augmented.append(dataclasses.replace(e, bsd=bsd, ci_low=lo, ci_high=hi,
                                                 p_value=pv))
        else:
            augmented.append(e)
    return augmented, BootstrapSummary(reps_mat, n_failed, unreliable, messages)


# ---------------------------------------------------------------------------
# test oracle
# ---------------------------------------------------------------------------


def influence_variance(main: MainDataset, true_ps, true_cm, x: int,
                       tau_true: float) -> InfluenceOracle:
    """Efficient-influence values ``f_x`` under known nuisances and their second moment."""
    pi = np.asarray(true_ps, dtype=float)
    mu = np.asarray(true_cm, dtype=float)
    ind = (main.x == x).astype(float)
    f = ind / pi * main.y - (ind - pi) / pi * mu - tau_true
    return InfluenceOracle(f, float(np.mean(f * f)))


def oracle_predictions(main: MainDataset, ps: dict, cm: dict) -> CandidatePredictions:
    """Wrap known nuisance values (level -> vector) as single-candidate predictions."""
    idx = np.arange(main.n)
    return CandidatePredictions(
        idx, {k: np.asarray(v, dtype=float).reshape(-1, 1) for k, v in ps.items()},
        {k: np.asarray(v, dtype=float).reshape(-1, 1) for k, v in cm.items()},
        (LearnerKind.RIDGE_MULTINOMIAL,), (LearnerKind.RIDGE_REGRESSION,))
