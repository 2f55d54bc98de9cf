"""Candidate learners for propensity scores and conditional means.

Every learner is fitted from a seed and a design matrix only, so identical
inputs give bit-identical predictions. Tuning parameters chosen by
cross-validation are reported in ``FittedModel.chosen``; passing them back
through ``LearnerSpec.frozen`` skips the search (used by the bootstrap).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from . import trees
from .data import LearnerKind, LearnerSpec, MainDataset, StudyConfig

DEFAULT_LAMBDAS = tuple(np.logspace(-4, 2, 20))
RIDGE_FOLDS = 5
BOOST_FOLDS = 10
BOOST_MAX_ROUNDS = 500
BOOST_DEPTH = 3
BOOST_SHRINK = 0.1
TREE_MIN_LEAF = 5
FOREST_TREES = 1000


class LearnerError(ValueError):
    """Training data violate a learner precondition."""


@dataclass
class FittedModel:
    kind: LearnerKind
    role: str  # "ps" or "cm"
    n_features: int
    n_levels: int
    state: dict
    chosen: dict = field(default_factory=dict)
    cv_score: Optional[float] = None
    level: Optional[int] = None
    clip: float = 1e-3


@dataclass
class CandidatePredictions:
    """Candidate nuisance predictions over one evaluation half.

    ``ps[x]`` is ``(m, J1)`` and ``cm[x]`` is ``(m, J2)``; rows follow
    ``eval_idx``.
    """

    eval_idx: np.ndarray
    ps: dict
    cm: dict
    ps_kinds: tuple
    cm_kinds: tuple
    chosen: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _rng(seed):
    return np.random.default_rng(seed)


def _standardizer(Z):
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, np.inf)
    return mu, sd


def _folds(n, k, rng, strata=None):
    """Fold id per row; stratified round-robin within ``strata`` when given."""
    fid = np.empty(n, dtype=np.int64)
    if strata is None:
        fid[rng.permutation(n)] = np.arange(n) % k
        return fid
    offset = 0
    for s in np.unique(strata):
        rows = np.flatnonzero(strata == s)
        fid[rows[rng.permutation(rows.size)]] = (np.arange(rows.size) + offset) % k
        offset += rows.size
    return fid


def clip_and_normalize(P, eps):
    """Clip probabilities to ``[eps, 1 - eps]`` and rescale rows to sum to one."""
    P = np.clip(np.asarray(P, dtype=float), eps, 1.0 - eps)
    return P / P.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# ridge
# ---------------------------------------------------------------------------


def _ridge_path(Xs, y, lambdas):
    """Ridge coefficients ``(intercept, beta)`` for each lambda via one SVD.

    Minimizes ``mean((y - b0 - X b)^2) / 2 + lam * |b|^2 / 2``.
    """
    n = Xs.shape[0]
    xm = Xs.mean(axis=0)
    ym = y.mean()
    U, s, Vt = np.linalg.svd(Xs - xm, full_matrices=False)
    uty = U.T @ (y - ym)
    out = []
    for lam in lambdas:
        with np.errstate(over="ignore"):
            d = s / (s * s + n * lam)
        beta = Vt.T @ (d * uty)
        out.append((ym - xm @ beta, beta))
    return out


def _fit_ridge(Z, y, hp, rng):
    mu, sd = _standardizer(Z)
    Xs = (Z - mu) / sd
    if "lambda" in hp:
        lambdas, cv = [float(hp["lambda"])], None
    else:
        lambdas = [float(v) for v in hp.get("lambdas", DEFAULT_LAMBDAS)]
        k = int(hp.get("cv_folds", RIDGE_FOLDS))
        fid = _folds(len(y), k, rng)
        sse = np.zeros(len(lambdas))
        for f in range(k):
            tr, te = fid != f, fid == f
            m_, s_ = _standardizer(Z[tr])
            path = _ridge_path((Z[tr] - m_) / s_, y[tr], lambdas)
            Xt = (Z[te] - m_) / s_
            for j, (b0, b) in enumerate(path):
                sse[j] += np.sum((y[te] - b0 - Xt @ b) ** 2)
        cv = sse / len(y)
    best = int(np.argmin(cv)) if cv is not None else 0
    b0, beta = _ridge_path(Xs, y, [lambdas[best]])[0]
    state = {"mu": mu, "sd": sd, "b0": b0, "beta": beta, "cv_curve": cv,
             "lambdas": np.asarray(lambdas)}
    return state, {"lambda": lambdas[best]}, (None if cv is None else float(cv[best]))


def _multinom_fit(Xa, Y1h, lam, B0=None, max_iter=100, tol=1e-9):
    """Reference-class softmax regression by damped Newton.

    ``Xa`` carries a leading intercept column that is not penalized.
    Objective: ``mean(-loglik) + lam / 2 * |B[1:]|^2``.
    """
    n, d = Xa.shape
    C = Y1h.shape[1] - 1
    pen = np.ones(d)
    pen[0] = 0.0
    B = np.zeros((d, C)) if B0 is None else B0.copy()

    def obj(B):
        eta = np.column_stack([np.zeros(n), Xa @ B])
        lse = logsumexp(eta, axis=1)
        nll = np.mean(lse - np.sum(eta * Y1h, axis=1))
        return nll + 0.5 * lam * np.sum(pen[:, None] * B * B), eta, lse

    f, eta, lse = obj(B)
    for _ in range(max_iter):
        P = np.exp(eta - lse[:, None])[:, 1:]
        grad = Xa.T @ (P - Y1h[:, 1:]) / n + lam * pen[:, None] * B
        if np.max(np.abs(grad)) < tol:
            break
        H = np.empty((C * d, C * d))
        for c in range(C):
            for e in range(c, C):
                w = P[:, c] * ((c == e) - P[:, e])
                blk = (Xa * w[:, None]).T @ Xa / n
                if c == e:
                    blk = blk + lam * np.diag(pen) + 1e-12 * np.eye(d)
                H[c * d:(c + 1) * d, e * d:(e + 1) * d] = blk
                H[e * d:(e + 1) * d, c * d:(c + 1) * d] = blk.T
        g = grad.T.reshape(-1)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        step = step.reshape(C, d).T
        t = 1.0
        dec = float(np.sum(grad * step))
        for _ in range(40):
            fc, etac, lsec = obj(B + t * step)
            if fc <= f + 1e-4 * t * dec:
                break
            t *= 0.5
        else:
            break
        B = B + t * step
        if f - fc < 1e-14 * max(1.0, abs(f)):
            f, eta, lse = fc, etac, lsec
            break
        f, eta, lse = fc, etac, lsec
    return B


def _multinom_proba(Xa, B):
    eta = np.column_stack([np.zeros(Xa.shape[0]), Xa @ B])
    return np.exp(eta - logsumexp(eta, axis=1)[:, None])


def _fit_ridge_multinomial(Z, x, K, hp, rng):
    mu, sd = _standardizer(Z)
    Y1h = np.eye(K)[x]

    def design(Zm, m_, s_):
        return np.column_stack([np.ones(Zm.shape[0]), (Zm - m_) / s_])

    if "lambda" in hp:
        lambdas, cv = [float(hp["lambda"])], None
    else:
        lambdas = [float(v) for v in hp.get("lambdas", DEFAULT_LAMBDAS)]
        order = np.argsort(lambdas)[::-1]  # warm starts from heavy shrinkage
        k = int(hp.get("cv_folds", RIDGE_FOLDS))
        fid = _folds(len(x), k, rng, strata=x)
        dev = np.zeros(len(lambdas))
        for f in range(k):
            tr, te = fid != f, fid == f
            m_, s_ = _standardizer(Z[tr])
            Xtr, Xte = design(Z[tr], m_, s_), design(Z[te], m_, s_)
            B = None
            for j in order:
                B = _multinom_fit(Xtr, Y1h[tr], lambdas[j], B)
                P = _multinom_proba(Xte, B)
                dev[j] -= np.sum(np.log(np.maximum(P[np.arange(te.sum()), x[te]], 1e-300)))
        cv = dev / len(x)
    best = int(np.argmin(cv)) if cv is not None else 0
    B = _multinom_fit(design(Z, mu, sd), Y1h, lambdas[best])
    state = {"mu": mu, "sd": sd, "B": B, "cv_curve": cv, "lambdas": np.asarray(lambdas)}
    return state, {"lambda": lambdas[best]}, (None if cv is None else float(cv[best]))


# ---------------------------------------------------------------------------
# forests
# ---------------------------------------------------------------------------


def _fit_forest(Z, Y, hp, rng, default_mtry):
    n, p = Z.shape
    n_trees = int(hp.get("n_trees", FOREST_TREES))
    mtry = int(hp.get("mtry", default_mtry))
    min_leaf = int(hp.get("min_leaf", TREE_MIN_LEAF))
    idx = rng.integers(0, n, size=(n_trees, n))
    seeds = rng.integers(0, np.iinfo(np.int64).max, size=n_trees, dtype=np.int64)
    forest = trees.build_forest(Z, Y, idx, seeds.astype(np.uint64), min_leaf=min_leaf,
                                mtry=mtry)
    return {"forest": forest}, {}, None


# ---------------------------------------------------------------------------
# boosting
# ---------------------------------------------------------------------------


def _logit_base(t):
    m = min(max(float(np.mean(t)), 1e-6), 1 - 1e-6)
    return math.log(m / (1 - m))


def _fit_booster(Z, t, loss, hp, rng, strata=None):
    depth = int(hp.get("depth", BOOST_DEPTH))
    shrink = float(hp.get("shrinkage", BOOST_SHRINK))
    min_leaf = int(hp.get("min_leaf", TREE_MIN_LEAF))

    def base_of(v):
        return float(np.mean(v)) if loss == trees.SQUARED else _logit_base(v)

    cv = None
    if "n_rounds" in hp:
        rounds = int(hp["n_rounds"])
    else:
        max_rounds = int(hp.get("max_trees", BOOST_MAX_ROUNDS))
        k = int(hp.get("cv_folds", BOOST_FOLDS))
        fid = _folds(len(t), k, rng, strata=strata)
        total = np.zeros(max_rounds + 1)
        for f in range(k):
            tr, te = fid != f, fid == f
            _, vl = trees.boost(Z[tr], t[tr], loss=loss, n_rounds=max_rounds,
                                max_depth=depth, min_leaf=min_leaf, shrink=shrink,
                                base=base_of(t[tr]), X_val=Z[te], y_val=t[te])
            total += te.sum() * vl
        cv = total / len(t)
        rounds = int(np.argmin(cv))
    base = base_of(t)
    model, _ = trees.boost(Z, t, loss=loss, n_rounds=rounds, max_depth=depth,
                           min_leaf=min_leaf, shrink=shrink, base=base)
    return {"booster": model, "base": base, "rounds": rounds, "cv_curve": cv}, rounds, \
        (None if cv is None else float(cv[rounds]))


def _booster_score(st, Z):
    if st["rounds"] == 0:
        return np.full(Z.shape[0], st["base"])
    return st["base"] + trees.predict_trees(st["booster"], Z, average=False)[:, 0]


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def fit_ps(spec: LearnerSpec, z_train, x_train, levels: int, seed=0,
           clip: float = 1e-3) -> FittedModel:
    """Fit a propensity model over ``levels`` exposure categories."""
    Z = np.ascontiguousarray(z_train, dtype=float)
    x = np.asarray(x_train, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] != x.shape[0]:
        raise LearnerError("z_train rows must match x_train length")
    counts = np.bincount(x, minlength=levels)
    if counts.size != levels or np.any(counts == 0):
        absent = [int(l) for l in np.flatnonzero(counts[:levels] == 0)]
        raise LearnerError(f"exposure level(s) {absent} absent from training rows")
    rng = _rng(seed)
    hp = spec.hyperparams
    p = Z.shape[1]
    kind = spec.kind
    if kind in (LearnerKind.RIDGE_MULTINOMIAL, LearnerKind.RIDGE_REGRESSION):
        state, chosen, cv = _fit_ridge_multinomial(Z, x, levels, hp, rng)
        kind = LearnerKind.RIDGE_MULTINOMIAL
    elif kind is LearnerKind.RANDOM_FOREST:
        Y = (x == 1).astype(float)[:, None] if levels == 2 else np.eye(levels)[x]
        state, chosen, cv = _fit_forest(Z, Y, hp, rng, math.ceil(math.sqrt(p)))
    else:
        # binary exposure: a single booster on I(X = 1); otherwise one-vs-rest
        targets = [1] if levels == 2 else list(range(levels))
        boosters, rounds, cvs = [], [], []
        frozen = hp.get("n_rounds")
        for i, lvl in enumerate(targets):
            hp_l = dict(hp)
            if frozen is not None:
                hp_l["n_rounds"] = frozen if np.isscalar(frozen) else frozen[i]
            st, r, c = _fit_booster(Z, (x == lvl).astype(float), trees.LOGISTIC, hp_l,
                                    rng, strata=x)
            boosters.append(st)
            rounds.append(r)
            cvs.append(c)
        state = {"boosters": boosters}
        chosen = {"n_rounds": rounds[0] if levels == 2 else rounds}
        cv = None if cvs[0] is None else float(np.mean(cvs))
    return FittedModel(kind, "ps", p, levels, state, chosen, cv, None, clip)


def fit_cm(spec: LearnerSpec, z_train, y_train, x_train, level: int, seed=0) -> FittedModel:
    """Fit ``E(Y | X = level, Z)`` on the subgroup ``x_train == level``."""
    Z = np.ascontiguousarray(z_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    x = np.asarray(x_train, dtype=np.int64)
    if Z.ndim != 2 or not (Z.shape[0] == y.shape[0] == x.shape[0]):
        raise LearnerError("z_train, y_train and x_train must have matching rows")
    rows = x == level
    n_sub = int(rows.sum())
    p = Z.shape[1]
    need = max(10, math.ceil(p / 10))
    if n_sub < need:
        raise LearnerError(f"level {level} has {n_sub} training units; need at least {need}")
    Zs, ys = Z[rows], y[rows]
    rng = _rng(seed)
    hp = spec.hyperparams
    kind = spec.kind
    if kind in (LearnerKind.RIDGE_REGRESSION, LearnerKind.RIDGE_MULTINOMIAL):
        state, chosen, cv = _fit_ridge(Zs, ys, hp, rng)
        kind = LearnerKind.RIDGE_REGRESSION
    elif kind is LearnerKind.RANDOM_FOREST:
        state, chosen, cv = _fit_forest(Zs, ys[:, None], hp, rng, math.ceil(p / 3))
    else:
        state, rounds, cv = _fit_booster(Zs, ys, trees.SQUARED, hp, rng)
        chosen = {"n_rounds": rounds}
    return FittedModel(kind, "cm", p, 0, state, chosen, cv, level)


def predict(model: FittedModel, z_eval) -> np.ndarray:
    """PS models return clipped, row-normalized ``(m, levels)`` probabilities;
    CM models return an ``(m,)`` vector."""
    Z = np.ascontiguousarray(z_eval, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != model.n_features:
        raise LearnerError(f"expected {model.n_features} covariate columns, got "
                           f"{Z.shape[1] if Z.ndim == 2 else Z.ndim}")
    st = model.state
    kind = model.kind
    if model.role == "cm":
        if kind is LearnerKind.RIDGE_REGRESSION:
            return st["b0"] + ((Z - st["mu"]) / st["sd"]) @ st["beta"]
        if kind is LearnerKind.RANDOM_FOREST:
            return trees.predict_trees(st["forest"], Z)[:, 0]
        return _booster_score(st, Z)
    K = model.n_levels
    if kind is LearnerKind.RIDGE_MULTINOMIAL:
        Xa = np.column_stack([np.ones(Z.shape[0]), (Z - st["mu"]) / st["sd"]])
        P = _multinom_proba(Xa, st["B"])
    elif kind is LearnerKind.RANDOM_FOREST:
        V = trees.predict_trees(st["forest"], Z)
        P = np.column_stack([1.0 - V[:, 0], V[:, 0]]) if K == 2 else V
    else:
        S = np.column_stack([expit(_booster_score(b, Z)) for b in st["boosters"]])
        P = np.column_stack([1.0 - S[:, 0], S[:, 0]]) if K == 2 else S
    return clip_and_normalize(P, model.clip)


def _seed_for(seed, half, role, j, level):
    return [int(seed), int(half), role, int(j), int(level)]


def assemble_candidates(main: MainDataset, config: StudyConfig, train_idx, eval_idx,
                        seed=None, *, half: int = 0,
                        frozen: Optional[dict] = None) -> CandidatePredictions:
    """Fit every candidate on ``train_idx`` rows and predict on ``eval_idx`` rows.

    ``frozen`` maps ``(role, j, level)`` to hyperparameters selected in an
    earlier fit; when present, cross-validation is skipped for that model.
    The returned ``chosen`` map has the same keys.
    """
    seed = config.seed if seed is None else seed
    train_idx = np.asarray(train_idx, dtype=np.int64)
    eval_idx = np.asarray(eval_idx, dtype=np.int64)
    K = main.n_levels
    Ztr, xtr, ytr = main.z[train_idx], main.x[train_idx], main.y[train_idx]
    Zev = main.z[eval_idx]
    frozen = frozen or {}
    chosen = {}
    ps_cols = []
    for j, spec in enumerate(config.ps_candidates):
        key = ("ps", j, -1)
        sp = spec.frozen(frozen[key]) if key in frozen else spec
        model = fit_ps(sp, Ztr, xtr, K, _seed_for(seed, half, 0, j, 0), clip=config.ps_clip)
        chosen[key] = model.chosen
        ps_cols.append(predict(model, Zev))
    cm = {}
    for lvl in range(K):
        cols = []
        for j, spec in enumerate(config.cm_candidates):
            key = ("cm", j, lvl)
            sp = spec.frozen(frozen[key]) if key in frozen else spec
            model = fit_cm(sp, Ztr, ytr, xtr, lvl, _seed_for(seed, half, 1, j, lvl))
            chosen[key] = model.chosen
            cols.append(predict(model, Zev))
        cm[lvl] = np.column_stack(cols)
    ps = {lvl: np.column_stack([P[:, lvl] for P in ps_cols]) for lvl in range(K)}
    return CandidatePredictions(eval_idx, ps, cm,
                                tuple(s.kind for s in config.ps_candidates),
                                tuple(s.kind for s in config.cm_candidates), chosen)
