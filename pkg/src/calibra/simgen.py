"""Simulation designs, truth oracles and the Monte Carlo harness.

Confounders are equicorrelated standard normals (correlation 0.5); only the
first five enter the propensity and outcome models. The exposure is binary
by default, with a softmax three-level extension.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import norm

from .data import AuxDataset, MainDataset, StudyConfig
from .el import ELError
from .estimators import (bootstrap_inference, cross_fit_estimate, method_names,
                         replicate_seed, resolve_threads, run_ordered)
from .learners import LearnerError

SQRT_HALF = math.sqrt(0.5)
# coordinates of the exponential tilt that produces the heterogeneous auxiliary
# population: Z1 and Z2 move, the other columns follow through the correlation
HETERO_TILT = (0, 1)


class Case(IntEnum):
    CASE1 = 1
    CASE2 = 2
    CASE3 = 3


@dataclass(frozen=True)
class Scenario:
    case: Case = Case.CASE1
    p: int = 10
    n: int = 1000
    aux_multiplier: float = 2.0
    levels: int = 2
    heterogeneity_shift: float = 0.0
    runs: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "case", Case(int(self.case)))
        if self.p < 5:
            raise ValueError("p must be at least 5 (five true confounders)")
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if self.levels not in (2, 3):
            raise ValueError("levels must be 2 or 3")
        if self.aux_multiplier < 0:
            raise ValueError("aux_multiplier must be non-negative")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    @property
    def n_aux(self) -> int:
        return int(math.floor(self.aux_multiplier * self.n))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gen_covariates(n: int, p: int, rng, shift=None) -> np.ndarray:
    """``Z = sqrt(.5) F + sqrt(.5) E``: unit variances, pairwise correlation 0.5."""
    F = rng.standard_normal((n, 1))
    E = rng.standard_normal((n, p))
    Z = SQRT_HALF * F + SQRT_HALF * E
    if shift is not None:
        Z += shift
    return Z


def _ps_linear_predictor(case: Case, Z):
    Z1, Z2, Z3, Z4, Z5 = (Z[:, j] for j in range(5))
    if case is Case.CASE1:
        return 0.5 * Z1 - 0.5 * Z2 + 0.5 * Z3 - 0.5 * Z4 + 0.5 * Z5
    return -1.0 + Z1 - 0.5 * Z2 ** 2 + np.abs(Z3) - 0.5 * Z4 * Z5


def true_ps(case, Z, levels: int = 2) -> np.ndarray:
    """Exposure probabilities, shape ``(n, levels)``.

    With three levels the level-2 linear predictor is the level-1 predictor
    evaluated on the reversed first five columns, minus 0.5 (level 0 is the
    reference).
    """
    case = Case(int(case))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    eta1 = _ps_linear_predictor(case, Z)
    if levels == 2:
        p1 = expit(eta1)
        return np.column_stack([1.0 - p1, p1])
    eta2 = _ps_linear_predictor(case, Z[:, [4, 3, 2, 1, 0]]) - 0.5
    return softmax(np.column_stack([np.zeros(Z.shape[0]), eta1, eta2]), axis=1)


def true_cm(case, x, Z) -> np.ndarray:
    """Conditional mean of ``Y(x)`` given ``Z``."""
    case = Case(int(case))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Z1, Z2, Z3, Z4, Z5 = (Z[:, j] for j in range(5))
    if case is Case.CASE3:
        # 0.5 multiplies the whole curly-brace sum; the bracket then scales by (0.5x + 1)
        inner = Z1 + 0.5 * Z2 ** 2 + Z2 * Z3 + Z3 + (Z4 > 0.3) + Z4 * (Z5 > 0)
        return 0.5 * x + 0.5 * inner * (0.5 * x + 1.0)
    return 0.5 * x + (Z1 + Z2 + Z3 + Z4 + Z5) * (0.5 * x + 1.0)


def _draw_units(case, levels, Z, rng):
    P = true_ps(case, Z, levels)
    u = rng.random(Z.shape[0])
    x = (u[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1).astype(np.int64)
    mu = np.column_stack([true_cm(case, lvl, Z) for lvl in range(levels)])
    y = mu[np.arange(Z.shape[0]), x] + rng.standard_normal(Z.shape[0])
    return y, x


def tilt_vector(p: int) -> np.ndarray:
    """Mean shift per unit tilt: ``Sigma @ a`` with ``a`` the indicator of ``HETERO_TILT``."""
    a = np.zeros(p)
    a[list(HETERO_TILT)] = 1.0
    sigma = 0.5 * np.ones((p, p)) + 0.5 * np.eye(p)
    return sigma @ a


_TILT_CACHE = {}


def calibrate_tilt(case, p: int, levels: int, delta: float, draws: int = 400_000) -> float:
    """Tilt size ``t`` whose auxiliary outcome mean exceeds the main mean by ``delta``.

    Uses common random numbers, so the map from ``t`` to the mean gap is a
    smooth deterministic function solved by bisection.
    """
    key = (int(case), p, levels, float(delta), draws)
    if key in _TILT_CACHE:
        return _TILT_CACHE[key]
    if delta == 0:
        return 0.0
    rng = np.random.default_rng([0xC0FFEE, int(case), p, levels])
    Z = gen_covariates(draws, 5, rng)
    v = tilt_vector(p)[:5]

    def mean_outcome(t):
        Zt = Z + t * v
        P = true_ps(case, Zt, levels)
        mu = np.column_stack([true_cm(case, lvl, Zt) for lvl in range(levels)])
        return float(np.mean(np.sum(P * mu, axis=1)))

    base = mean_outcome(0.0)
    lo, hi = 0.0, 0.25 * np.sign(delta)
    while abs(mean_outcome(hi) - base) < abs(delta):
        lo, hi = hi, 2 * hi
        if abs(hi) > 64:
            raise ValueError(f"cannot reach a mean shift of {delta}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if abs(mean_outcome(mid) - base) < abs(delta):
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    _TILT_CACHE[key] = t
    return t


def gen_study(scenario: Scenario, rng):
    """Main data ``(Y, X, Z)`` and auxiliary data ``(Y, X)``.

    In heterogeneous scenarios the auxiliary covariates are drawn from an
    exponentially tilted normal, shifting ``Z1`` and ``Z2`` (and the rest
    through the correlation), with the tilt calibrated so that the auxiliary
    outcome mean exceeds the main mean by ``heterogeneity_shift``. The first
    two columns of the auxiliary ``Z`` are then kept as shared covariates.
    """
    sc = scenario
    Z = gen_covariates(sc.n, sc.p, rng)
    y, x = _draw_units(sc.case, sc.levels, Z, rng)
    main = MainDataset(y, x, Z)
    shift = None
    if sc.heterogeneity_shift != 0:
        t = calibrate_tilt(sc.case, sc.p, sc.levels, sc.heterogeneity_shift)
        shift = t * tilt_vector(sc.p)
    Za = gen_covariates(sc.n_aux, sc.p, rng, shift)
    ya, xa = _draw_units(sc.case, sc.levels, Za, rng) if sc.n_aux else (np.zeros(0),
                                                                        np.zeros(0, int))
    shared_cols = list(HETERO_TILT)
    aux = AuxDataset(ya, xa, Za[:, shared_cols],
                     tuple(f"z{j + 1}" for j in shared_cols))
    return main, aux


# ---------------------------------------------------------------------------
# truth
# ---------------------------------------------------------------------------


def analytic_tau(case, x: int):
    """Closed-form ``E Y(x)``, or ``None`` when unavailable.

    Cases 1 and 2 have mean-zero confounder terms. In Case 3,
    ``E Z2^2 = 1``, ``E Z2 Z3 = 0.5``, ``P(Z4 > 0.3) = 1 - Phi(0.3)`` and
    ``E Z4 I(Z5 > 0) = 0.5 phi(0)``.
    """
    case = Case(int(case))
    if case is not Case.CASE3:
        return 0.5 * x
    inner = 0.5 + 0.5 + norm.sf(0.3) + 0.5 * norm.pdf(0.0)
    return 0.5 * x + 0.5 * inner * (0.5 * x + 1.0)


def true_tau_oracle(case, x: int, draws: int = 10 ** 6, rng=None, chunk: int = 500_000):
    """Monte Carlo ``E mu_x(Z)``; returns ``(estimate, standard error)``."""
    rng = np.random.default_rng(0) if rng is None else rng
    total = 0.0
    total2 = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        v = true_cm(case, x, gen_covariates(m, 5, rng))
        total += float(v.sum())
        total2 += float(np.dot(v, v))
        done += m
    mean = total / draws
    var = max(total2 / draws - mean * mean, 0.0) * draws / max(draws - 1, 1)
    return mean, math.sqrt(var / draws)


def scenario_truth(scenario: Scenario, oracle_draws: int = 10 ** 7):
    """Per-level truth and its standard error.

    Exact values are used where a closed form exists (Cases 1 and 2, and the
    binary Case 3); otherwise the Monte Carlo oracle.
    """
    truth, se = [], []
    for lvl in range(scenario.levels):
        a = analytic_tau(scenario.case, lvl)
        if a is not None:
            truth.append(float(a))
            se.append(0.0)
        else:  # pragma: no cover - every current design has a closed form
            v, s = true_tau_oracle(scenario.case, lvl, oracle_draws,
                                   np.random.default_rng([scenario.seed, 0x7247, lvl]))
            truth.append(v)
            se.append(s)
    return tuple(truth), tuple(se)


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass
class MonteCarloRow:
    method: str
    level: int
    bias: float
    mcsd: float
    bsd: Optional[float]
    cp: Optional[float]
    failures: int
    n_ok: int


@dataclass
class MonteCarloTable:
    scenario: Scenario
    truth: tuple
    truth_se: tuple
    rows: list
    estimates: dict = field(default_factory=dict)  # (level, method) -> per-run values
    bsds: dict = field(default_factory=dict)

    def row(self, method: str, level: int) -> MonteCarloRow:
        for r in self.rows:
            if r.method == method and r.level == level:
                return r
        raise KeyError((method, level))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "level", "truth", "bias", "mcsd", "bsd", "cp", "failures",
                    "n_ok"])
        for r in self.rows:
            w.writerow([r.method, r.level, _g17(self.truth[r.level]), _g17(r.bias),
                        _g17(r.mcsd), _g17(r.bsd), _g17(r.cp), r.failures, r.n_ok])
        return buf.getvalue()

    def to_text(self) -> str:
        sc = self.scenario
        head = (f"Case {int(sc.case)}  p={sc.p}  n={sc.n}  aux={sc.n_aux}  "
                f"levels={sc.levels}  shift={sc.heterogeneity_shift:g}  runs={sc.runs}")
        lines = [head, f"{'method':<14}{'x':>3}{'Bias':>9}{'MCSD':>9}{'BSD':>9}"
                       f"{'CP':>7}{'fail':>6}"]
        for r in self.rows:
            lines.append(f"{r.method:<14}{r.level:>3}{_f3(r.bias):>9}{_f3(r.mcsd):>9}"
                         f"{_f3(r.bsd):>9}{_f1(r.cp):>7}{r.failures:>6}")
        return "\n".join(lines) + "\n"


def _g17(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return f"{v:.17g}"


def _f3(v):
    return "" if v is None or not math.isfinite(v) else f"{v:.3f}"


def _f1(v):
    return "" if v is None or not math.isfinite(v) else f"{v:.1f}"


def _run_one(r):
    from .estimators import _WORKER_STATE as st
    from .matching import match_aux

    scenario, config, reps = st["scenario"], st["config"], st["boot_reps"]
    rseed = replicate_seed(scenario.seed, 10_000 + r)
    rng = np.random.default_rng(rseed)
    main, aux = gen_study(scenario, rng)
    cfg = dataclasses.replace(config, seed=rseed, match_ratio=None)
    variants = {}
    if config.match_ratio is not None and aux.size:
        mres = match_aux(main.z[:, list(HETERO_TILT)], aux.shared, config.match_ratio,
                         seed=rseed)
        variants["matched"] = aux.subset(mres.kept_aux_indices)
    keys = [(lvl, m) for lvl in range(scenario.levels) for m in st["methods"]]
    vals = np.full(len(keys), np.nan)
    bsd = np.full(len(keys), np.nan)
    try:
        res = cross_fit_estimate(main, aux, cfg, strict=False, aux_variants=variants)
    except (ELError, LearnerError, ValueError):
        return vals, bsd
    for c, (lvl, m) in enumerate(keys):
        vals[c] = res.get(lvl, m).tau_hat
    if reps:
        try:
            aug, _ = bootstrap_inference(main, aux, cfg, res, reps=reps, threads=1,
                                         aux_variants=variants)
        except ELError:
            return vals, bsd
        for c, (lvl, m) in enumerate(keys):
            e = next(e for e in aug if e.level == lvl and e.method == m)
            bsd[c] = np.nan if e.bsd is None else e.bsd
    return vals, bsd


def run_monte_carlo(scenario: Scenario, config: Optional[StudyConfig] = None, *,
                    bootstrap_reps: int = 0, threads: Optional[int] = 1) -> MonteCarloTable:
    """Repeat generate -> cross-fit (-> bootstrap) and summarize against the truth.

    Replicate ``r`` draws from its own stream keyed by ``(seed, r)``, so the
    table does not depend on ``threads``. When ``config.match_ratio`` is set,
    an extra ``CMLIB.matched`` method uses the auxiliary units retained by
    nearest-neighbour matching on the shared covariates.
    """
    config = config or StudyConfig()
    truth, truth_se = scenario_truth(scenario)
    methods = list(method_names(config))
    if config.match_ratio is not None:
        methods.append("CMLIB.matched")
    state = {"scenario": scenario, "config": config, "boot_reps": bootstrap_reps,
             "methods": methods}
    out = run_ordered(_run_one, range(scenario.runs), state, resolve_threads(threads))
    V = np.vstack([v for v, _ in out])
    S = np.vstack([s for _, s in out])
    keys = [(lvl, m) for lvl in range(scenario.levels) for m in methods]
    rows, est, bsds = [], {}, {}
    z = norm.ppf(0.975)
    for c, (lvl, m) in enumerate(keys):
        v = V[:, c]
        ok = np.isfinite(v)
        vals = v[ok]
        est[(lvl, m)] = v
        bias = float(vals.mean() - truth[lvl]) if vals.size else float("nan")
        mcsd = float(vals.std(ddof=1)) if vals.size >= 2 else float("nan")
        bsd = cp = None
        if bootstrap_reps:
            s = S[:, c]
            both = ok & np.isfinite(s)
            bsds[(lvl, m)] = s
            if both.any():
                bsd = float(s[both].mean())
                cover = np.abs(v[both] - truth[lvl]) <= z * s[both]
                cp = float(100.0 * cover.mean())
        rows.append(MonteCarloRow(m, lvl, bias, mcsd, bsd, cp, int((~ok).sum()),
                                  int(ok.sum())))
    return MonteCarloTable(scenario, truth, truth_se, rows, est, bsds)
