"""CART kernels shared by the random forest and gradient boosting learners.

Trees are multi-output regression trees grown on the summed squared-error
criterion. A classification forest is the same tree grown on one-hot class
indicators: summed indicator SSE equals n times the Gini impurity, so the
splits coincide with Gini splits and leaf means are class proportions.

Every kernel exists twice: a numba version (default) and a vectorized numpy
version selected with ``CALIBRA_PURE_NUMPY=1``. Randomness enters only via
the bootstrap index matrix drawn by the caller and a counter-based hash for
per-node feature subsampling, so both backends grow the same trees.

Node storage is flat. Tree ``t`` occupies slots ``[t * cap, (t + 1) * cap)``
and child pointers are absolute slot indices; ``feature == -1`` marks a leaf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

SQUARED = 0
LOGISTIC = 1


@dataclass
class TreeArrays:
    feature: np.ndarray  # int64 (n_slots,)
    threshold: np.ndarray  # float64 (n_slots,)
    left: np.ndarray  # int64 (n_slots,)
    right: np.ndarray  # int64 (n_slots,)
    value: np.ndarray  # float64 (n_slots, K)
    roots: np.ndarray  # int64 (n_trees,)
    n_nodes: np.ndarray  # int64 (n_trees,)

    @property
    def n_trees(self) -> int:
        return int(self.roots.shape[0])


def node_capacity(n_samples: int, min_leaf: int, max_depth: int) -> int:
    cap = 2 * max(n_samples // max(min_leaf, 1), 1) + 1
    if max_depth >= 0 and max_depth < 40:
        cap = min(cap, 2 ** (max_depth + 1) - 1)
    return max(cap, 1)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def _feature_order_nb(seed, node, p, mtry):
    if mtry >= p:
        return np.arange(p)
    keys = np.empty(p, dtype=np.uint64)
    base = np.uint64(node) * np.uint64(p)
    for j in range(p):
        keys[j] = _mix64(seed + (base + np.uint64(j + 1)) * _GOLDEN)
    order = np.argsort(keys, kind="mergesort")
    return order[:mtry]


@njit
def _rank_nb(X):
    n, p = X.shape
    rank = np.empty((n, p), dtype=np.int64)
    for f in range(p):
        order = np.argsort(X[:, f], kind="mergesort")
        for r in range(n):
            rank[order[r], f] = r
    return rank


@njit
def _grow_tree_nb(X, Y, idx, rank, max_depth, min_leaf, mtry, seed, cap,
                  feature, threshold, left, right, value, offset, assign):
    """Grow one tree into slots ``[offset, offset + cap)``; return node count.

    ``S[f]`` holds the node's rows sorted by (X[:, f], row id); every node is
    a contiguous range ``[s, e)`` of each ``S[f]``.
    """
    n = idx.shape[0]
    n_rows = X.shape[0]
    p = X.shape[1]
    K = Y.shape[1]
    S = np.empty((p, n), dtype=np.int64)
    cnt = np.empty(n_rows + 1, dtype=np.int64)
    for f in range(p):
        cnt[:] = 0
        for r in range(n):
            cnt[rank[idx[r], f] + 1] += 1
        for j in range(n_rows):
            cnt[j + 1] += cnt[j]
        for r in range(n):
            k = rank[idx[r], f]
            S[f, cnt[k]] = idx[r]
            cnt[k] += 1
    go_left = np.zeros(n_rows, dtype=np.int64)
    tmp = np.empty(n, dtype=np.int64)
    q_node = np.empty(cap, dtype=np.int64)
    q_start = np.empty(cap, dtype=np.int64)
    q_end = np.empty(cap, dtype=np.int64)
    q_depth = np.empty(cap, dtype=np.int64)
    T = np.empty(K)
    L = np.empty(K)
    head = 0
    tail = 1
    q_node[0] = 0
    q_start[0] = 0
    q_end[0] = n
    q_depth[0] = 0
    n_nodes = 1
    while head < tail:
        node = q_node[head]
        s = q_start[head]
        e = q_end[head]
        depth = q_depth[head]
        head += 1
        slot = offset + node
        m = e - s
        for k in range(K):
            T[k] = 0.0
        s2 = 0.0
        for r in range(s, e):
            row = S[0, r]
            for k in range(K):
                yk = Y[row, k]
                T[k] += yk
                s2 += yk * yk
        parent = 0.0
        for k in range(K):
            value[slot, k] = T[k] / m
            parent += T[k] * T[k] / m
        feature[slot] = -1
        threshold[slot] = 0.0
        left[slot] = -1
        right[slot] = -1
        node_sse = s2 - parent
        is_leaf = (m < 2 * min_leaf) or (max_depth >= 0 and depth >= max_depth)
        is_leaf = is_leaf or node_sse <= 1e-12 * s2 or n_nodes + 2 > cap
        best = parent + 1e-10 * node_sse
        best_f = -1
        best_thr = 0.0
        if not is_leaf:
            feats = _feature_order_nb(seed, node, p, mtry)
            for f in feats:
                for k in range(K):
                    L[k] = 0.0
                for i in range(1, m - min_leaf + 1):
                    row = S[f, s + i - 1]
                    for k in range(K):
                        L[k] += Y[row, k]
                    if i < min_leaf:
                        continue
                    a = X[row, f]
                    b = X[S[f, s + i], f]
                    if not (a < b):
                        continue
                    sc = 0.0
                    for k in range(K):
                        lk = L[k]
                        rk = T[k] - lk
                        sc = sc + (lk * lk / i + rk * rk / (m - i))
                    if sc > best:
                        best = sc
                        best_f = f
                        thr = 0.5 * (a + b)
                        if not (thr < b):
                            thr = a
                        best_thr = thr
        if best_f < 0:
            for r in range(s, e):
                assign[S[0, r]] = slot
            continue
        for r in range(s, e):
            row = S[0, r]
            go_left[row] = 1 if X[row, best_f] <= best_thr else 0
        nl = 0
        for f in range(p):
            # branch-free stable partition: lefts compact in place, rights via tmp
            nl = 0
            nr = 0
            for r in range(s, e):
                v = S[f, r]
                g = go_left[v]
                S[f, s + nl] = v
                tmp[nr] = v
                nl += g
                nr += 1 - g
            for r in range(nr):
                S[f, s + nl + r] = tmp[r]
        feature[slot] = best_f
        threshold[slot] = best_thr
        left[slot] = offset + n_nodes
        right[slot] = offset + n_nodes + 1
        q_node[tail] = n_nodes
        q_start[tail] = s
        q_end[tail] = s + nl
        q_depth[tail] = depth + 1
        q_node[tail + 1] = n_nodes + 1
        q_start[tail + 1] = s + nl
        q_end[tail + 1] = e
        q_depth[tail + 1] = depth + 1
        tail += 2
        n_nodes += 2
    return n_nodes


@njit
def _build_forest_nb(X, Y, idx_mat, seeds, max_depth, min_leaf, mtry, cap):
    n_trees = idx_mat.shape[0]
    K = Y.shape[1]
    size = n_trees * cap
    feature = np.full(size, -1, dtype=np.int64)
    threshold = np.zeros(size)
    left = np.full(size, -1, dtype=np.int64)
    right = np.full(size, -1, dtype=np.int64)
    value = np.zeros((size, K))
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    assign = np.zeros(X.shape[0], dtype=np.int64)
    rank = _rank_nb(X)
    for t in range(n_trees):
        n_nodes[t] = _grow_tree_nb(X, Y, idx_mat[t], rank, max_depth, min_leaf, mtry,
                                   seeds[t], cap, feature, threshold, left,
                                   right, value, t * cap, assign)
    return feature, threshold, left, right, value, n_nodes


@njit
def _predict_nb(X, feature, threshold, left, right, value, roots, average):
    n = X.shape[0]
    K = value.shape[1]
    out = np.zeros((n, K))
    for i in range(n):
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for k in range(K):
                out[i, k] += value[node, k]
    if average and roots.shape[0] > 0:
        for i in range(n):
            for k in range(K):
                out[i, k] /= roots.shape[0]
    return out


@njit
def _sigmoid_nb(f):
    return 1.0 / (1.0 + np.exp(-f))


@njit
def _boost_nb(X, y, loss, n_rounds, max_depth, min_leaf, shrink, base,
              Xv, yv, cap):
    n = X.shape[0]
    p = X.shape[1]
    nv = Xv.shape[0]
    size = n_rounds * cap
    feature = np.full(max(size, 1), -1, dtype=np.int64)
    threshold = np.zeros(max(size, 1))
    left = np.full(max(size, 1), -1, dtype=np.int64)
    right = np.full(max(size, 1), -1, dtype=np.int64)
    value = np.zeros((max(size, 1), 1))
    n_nodes = np.zeros(n_rounds, dtype=np.int64)
    F = np.full(n, base)
    Fv = np.full(nv, base)
    vloss = np.zeros(n_rounds + 1)
    idx = np.arange(n)
    R = np.empty((n, 1))
    assign = np.zeros(n, dtype=np.int64)
    num = np.zeros(cap)
    den = np.zeros(cap)
    vloss[0] = _loss_nb(yv, Fv, loss)
    rank = _rank_nb(X)
    for t in range(n_rounds):
        for i in range(n):
            if loss == 0:
                R[i, 0] = y[i] - F[i]
            else:
                R[i, 0] = y[i] - _sigmoid_nb(F[i])
        off = t * cap
        n_nodes[t] = _grow_tree_nb(X, R, idx, rank, max_depth, min_leaf, p,
                                   np.uint64(0), cap, feature, threshold,
                                   left, right, value, off, assign)
        if loss == 1:
            for j in range(cap):
                num[j] = 0.0
                den[j] = 0.0
            for i in range(n):
                j = assign[i] - off
                pr = _sigmoid_nb(F[i])
                num[j] += R[i, 0]
                den[j] += pr * (1.0 - pr)
            for j in range(n_nodes[t]):
                if feature[off + j] < 0:
                    if den[j] > 1e-12:
                        value[off + j, 0] = num[j] / den[j]
                    else:
                        value[off + j, 0] = 0.0
        for j in range(n_nodes[t]):
            value[off + j, 0] *= shrink
        for i in range(n):
            F[i] += value[assign[i], 0]
        for i in range(nv):
            node = off
            while feature[node] >= 0:
                if Xv[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            Fv[i] += value[node, 0]
        vloss[t + 1] = _loss_nb(yv, Fv, loss)
    return feature, threshold, left, right, value, n_nodes, vloss


@njit
def _loss_nb(y, F, loss):
    n = y.shape[0]
    if n == 0:
        return 0.0
    acc = 0.0
    for i in range(n):
        if loss == 0:
            d = y[i] - F[i]
            acc += d * d
        else:
            f = F[i]
            if f > 0:
                acc += f + np.log1p(np.exp(-f)) - y[i] * f
            else:
                acc += np.log1p(np.exp(f)) - y[i] * f
    return acc / n


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _feature_order_np(seed, node, p, mtry):
    if mtry >= p:
        return np.arange(p)
    j = np.arange(1, p + 1, dtype=np.uint64)
    keys = _mix64_np(np.uint64(seed) + (np.uint64(node) * np.uint64(p) + j) * _GOLDEN)
    return np.argsort(keys, kind="mergesort")[:mtry]


def _grow_tree_np(X, Y, idx, max_depth, min_leaf, mtry, seed, cap,
                  feature, threshold, left, right, value, offset, assign):
    K = Y.shape[1]
    rows0 = np.asarray(idx, dtype=np.int64)
    queue = [(0, rows0[np.lexsort((rows0, X[rows0, 0]))], 0)]
    head = 0
    n_nodes = 1
    while head < len(queue):
        node, rows, depth = queue[head]
        head += 1
        slot = offset + node
        m = rows.shape[0]
        Yn = Y[rows]
        T = np.cumsum(Yn, axis=0)[-1]
        s2 = np.cumsum((Yn * Yn).ravel())[-1]
        value[slot] = T / m
        parent = 0.0
        for k in range(K):
            parent += T[k] * T[k] / m
        feature[slot] = -1
        threshold[slot] = 0.0
        left[slot] = -1
        right[slot] = -1
        node_sse = s2 - parent
        is_leaf = (m < 2 * min_leaf) or (max_depth >= 0 and depth >= max_depth)
        is_leaf = is_leaf or node_sse <= 1e-12 * s2 or n_nodes + 2 > cap
        best = parent + 1e-10 * node_sse
        best_f = -1
        best_thr = 0.0
        if not is_leaf:
            sizes = np.arange(1, m, dtype=np.float64)
            for f in _feature_order_np(seed, node, X.shape[1], mtry):
                vals = X[rows, f]
                order = np.lexsort((rows, vals))
                vs = vals[order]
                Lc = np.cumsum(Yn[order], axis=0)[:-1]
                sc = np.zeros(m - 1)
                for k in range(K):
                    lk = Lc[:, k]
                    rk = T[k] - lk
                    sc = sc + (lk * lk / sizes + rk * rk / (m - sizes))
                ok = vs[:-1] < vs[1:]
                ok[: min_leaf - 1] = False
                if m - min_leaf < m - 1:
                    ok[m - min_leaf:] = False
                if not ok.any():
                    continue
                cand = np.where(ok, sc, -np.inf)
                i = int(np.argmax(cand))
                if cand[i] > best:
                    best = cand[i]
                    best_f = int(f)
                    a, b = vs[i], vs[i + 1]
                    thr = 0.5 * (a + b)
                    if not (thr < b):
                        thr = a
                    best_thr = thr
        if best_f < 0:
            assign[rows] = slot
            continue
        go_left = X[rows, best_f] <= best_thr
        feature[slot] = best_f
        threshold[slot] = best_thr
        left[slot] = offset + n_nodes
        right[slot] = offset + n_nodes + 1
        queue.append((n_nodes, rows[go_left], depth + 1))
        queue.append((n_nodes + 1, rows[~go_left], depth + 1))
        n_nodes += 2
    return n_nodes


def _build_forest_np(X, Y, idx_mat, seeds, max_depth, min_leaf, mtry, cap):
    n_trees = idx_mat.shape[0]
    K = Y.shape[1]
    size = n_trees * cap
    feature = np.full(size, -1, dtype=np.int64)
    threshold = np.zeros(size)
    left = np.full(size, -1, dtype=np.int64)
    right = np.full(size, -1, dtype=np.int64)
    value = np.zeros((size, K))
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    assign = np.zeros(X.shape[0], dtype=np.int64)
    for t in range(n_trees):
        n_nodes[t] = _grow_tree_np(X, Y, idx_mat[t], max_depth, min_leaf, mtry,
                                   seeds[t], cap, feature, threshold, left,
                                   right, value, t * cap, assign)
    return feature, threshold, left, right, value, n_nodes


def _leaves_np(X, feature, threshold, left, right, root):
    node = np.full(X.shape[0], root, dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        cur = node[active]
        f = feature[cur]
        go = X[np.flatnonzero(active), f] <= threshold[cur]
        node[active] = np.where(go, left[cur], right[cur])
        active = feature[node] >= 0
    return node


def _predict_np(X, feature, threshold, left, right, value, roots, average):
    out = np.zeros((X.shape[0], value.shape[1]))
    for root in roots:
        out += value[_leaves_np(X, feature, threshold, left, right, root)]
    if average and len(roots) > 0:
        out /= len(roots)
    return out


def _loss_np(y, F, loss):
    if y.shape[0] == 0:
        return 0.0
    if loss == SQUARED:
        return float(np.mean((y - F) ** 2))
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


def _boost_np(X, y, loss, n_rounds, max_depth, min_leaf, shrink, base, Xv, yv, cap):
    n, p = X.shape
    size = max(n_rounds * cap, 1)
    feature = np.full(size, -1, dtype=np.int64)
    threshold = np.zeros(size)
    left = np.full(size, -1, dtype=np.int64)
    right = np.full(size, -1, dtype=np.int64)
    value = np.zeros((size, 1))
    n_nodes = np.zeros(n_rounds, dtype=np.int64)
    F = np.full(n, float(base))
    Fv = np.full(Xv.shape[0], float(base))
    vloss = np.zeros(n_rounds + 1)
    vloss[0] = _loss_np(yv, Fv, loss)
    idx = np.arange(n)
    assign = np.zeros(n, dtype=np.int64)
    for t in range(n_rounds):
        if loss == SQUARED:
            r = y - F
        else:
            r = y - 1.0 / (1.0 + np.exp(-F))
        off = t * cap
        n_nodes[t] = _grow_tree_np(X, r[:, None], idx, max_depth, min_leaf, p,
                                   0, cap, feature, threshold, left, right,
                                   value, off, assign)
        if loss == LOGISTIC:
            pr = 1.0 / (1.0 + np.exp(-F))
            local = assign - off
            num = np.bincount(local, weights=r, minlength=cap)
            den = np.bincount(local, weights=pr * (1.0 - pr), minlength=cap)
            leaves = np.flatnonzero(feature[off:off + n_nodes[t]] < 0)
            safe = den[leaves] > 1e-12
            value[off + leaves, 0] = np.where(safe, num[leaves] / np.where(safe, den[leaves], 1.0), 0.0)
        value[off:off + n_nodes[t], 0] *= shrink
        F = F + value[assign, 0]
        if Xv.shape[0]:
            Fv = Fv + value[_leaves_np(Xv, feature, threshold, left, right, off), 0]
        vloss[t + 1] = _loss_np(yv, Fv, loss)
    return feature, threshold, left, right, value, n_nodes, vloss


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_forest(X, Y, idx_mat, seeds, *, max_depth=-1, min_leaf=5, mtry=None,
                 use_numba=None) -> TreeArrays:
    """Grow one tree per row of ``idx_mat`` (bootstrap row indices)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    idx_mat = np.ascontiguousarray(idx_mat, dtype=np.int64)
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    p = X.shape[1]
    mtry = p if mtry is None else int(min(max(mtry, 1), p))
    cap = node_capacity(idx_mat.shape[1], min_leaf, max_depth)
    fn = _build_forest_nb if (USE_NUMBA if use_numba is None else use_numba) else _build_forest_np
    feature, threshold, left, right, value, n_nodes = fn(
        X, Y, idx_mat, seeds, int(max_depth), int(min_leaf), int(mtry), int(cap))
    roots = np.arange(idx_mat.shape[0], dtype=np.int64) * cap
    return TreeArrays(feature, threshold, left, right, value, roots, n_nodes)


def predict_trees(trees: TreeArrays, X, *, average=True, use_numba=None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    fn = _predict_nb if (USE_NUMBA if use_numba is None else use_numba) else _predict_np
    return fn(X, trees.feature, trees.threshold, trees.left, trees.right,
              trees.value, trees.roots, average)


def boost(X, y, *, loss=SQUARED, n_rounds=100, max_depth=3, min_leaf=5,
          shrink=0.1, base=0.0, X_val=None, y_val=None, use_numba=None):
    """Stage-wise boosting of depth-limited trees.

    Returns ``(trees, val_loss)`` where ``val_loss[r]`` is the mean validation
    loss after ``r`` rounds (``r = 0`` is the constant ``base`` fit). Leaf
    values are stored already multiplied by ``shrink``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X_val is None:
        X_val = np.zeros((0, X.shape[1]))
        y_val = np.zeros(0)
    X_val = np.ascontiguousarray(X_val, dtype=np.float64)
    y_val = np.ascontiguousarray(y_val, dtype=np.float64)
    cap = node_capacity(X.shape[0], min_leaf, max_depth)
    fn = _boost_nb if (USE_NUMBA if use_numba is None else use_numba) else _boost_np
    feature, threshold, left, right, value, n_nodes, vloss = fn(
        X, y, int(loss), int(n_rounds), int(max_depth), int(min_leaf),
        float(shrink), float(base), X_val, y_val, int(cap))
    roots = np.arange(n_rounds, dtype=np.int64) * cap
    return TreeArrays(feature, threshold, left, right, value, roots, n_nodes), vloss
