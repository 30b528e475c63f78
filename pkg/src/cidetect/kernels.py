"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public function dispatches on :func:`cidetect._accel.get_backend`. The
tree builder and the splitmix64 stream are written so that both paths grow the
same tree node for node; the distance and gradient kernels agree to rounding.
"""

import math

import numpy as np

from ._accel import get_backend, njit

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


# --------------------------------------------------------------------------
# pairwise squared Euclidean distances


@njit
def _pairwise_sqdist_nb(A, B):
    m, p = A.shape
    n = B.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(p):
                diff = A[i, c] - B[j, c]
                acc += diff * diff
            out[i, j] = acc
    return out


def _pairwise_sqdist_np(A, B, chunk=64):
    out = np.empty((A.shape[0], B.shape[0]))
    for start in range(0, A.shape[0], chunk):
        block = A[start:start + chunk, None, :] - B[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", block, block)
    return out


def pairwise_sqdist(A, B):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    if get_backend() == "numba":
        return _pairwise_sqdist_nb(A, B)
    return _pairwise_sqdist_np(A, B)


# --------------------------------------------------------------------------
# k nearest neighbours (ties -> lower training index)


@njit
def _knn_nb(train, query, k, exclude_self):
    m, p = query.shape
    n = train.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    d = np.empty(n)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(p):
                diff = query[i, c] - train[j, c]
                acc += diff * diff
            d[j] = acc
        if exclude_self:
            d[i] = np.inf
        order = np.argsort(d, kind="mergesort")
        for t in range(k):
            out[i, t] = order[t]
    return out


def _knn_np(train, query, k, exclude_self):
    d = _pairwise_sqdist_np(query, train)
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def knn_indices(train, query, k, exclude_self=False):
    """Indices of the ``k`` nearest training rows for every query row.

    Neighbours are ordered by distance, equal distances by training index.
    With ``exclude_self`` the query set must be the training set and row ``i``
    never lists itself.
    """
    train = np.ascontiguousarray(train, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    n = train.shape[0]
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range for {n} training rows")
    if exclude_self and query.shape[0] != n:
        raise ValueError("exclude_self requires query to be the training set")
    if get_backend() == "numba":
        return _knn_nb(train, query, int(k), bool(exclude_self))
    return _knn_np(train, query, int(k), bool(exclude_self))


# --------------------------------------------------------------------------
# L2 logistic regression, gradient descent with Armijo backtracking


@njit
def _logreg_obj_grad_nb(X, s, w, b, lam, gw):
    n, p = X.shape
    obj = 0.0
    gb = 0.0
    for c in range(p):
        gw[c] = 0.0
    for i in range(n):
        z = b
        for c in range(p):
            z += X[i, c] * w[c]
        m = s[i] * z
        if m >= 0.0:
            e = math.exp(-m)
            obj += math.log1p(e)
            sig = e / (1.0 + e)
        else:
            e = math.exp(m)
            obj += -m + math.log1p(e)
            sig = 1.0 / (1.0 + e)
        coef = -s[i] * sig
        gb += coef
        for c in range(p):
            gw[c] += coef * X[i, c]
    reg = 0.0
    for c in range(p):
        reg += w[c] * w[c]
        gw[c] = gw[c] / n + lam * w[c]
    return obj / n + 0.5 * lam * reg, gb / n


@njit
def _logreg_nb(X, s, lam, max_iter, tol):
    p = X.shape[1]
    w = np.zeros(p)
    b = 0.0
    gw = np.zeros(p)
    gw_new = np.zeros(p)
    w_new = np.zeros(p)
    obj, gb = _logreg_obj_grad_nb(X, s, w, b, lam, gw)
    step = 1.0
    it = 0
    while it < max_iter:
        gmax = abs(gb)
        gsq = gb * gb
        for c in range(p):
            a = abs(gw[c])
            if a > gmax:
                gmax = a
            gsq += gw[c] * gw[c]
        if gmax < tol:
            break
        step = step * 2.0
        while True:
            for c in range(p):
                w_new[c] = w[c] - step * gw[c]
            b_new = b - step * gb
            obj_new, gb_new = _logreg_obj_grad_nb(X, s, w_new, b_new, lam, gw_new)
            if obj_new <= obj - 0.5 * step * gsq or step < 1e-20:
                break
            step *= 0.5
        for c in range(p):
            w[c] = w_new[c]
            gw[c] = gw_new[c]
        b = b_new
        gb = gb_new
        obj = obj_new
        it += 1
    return w, b, it


def _logreg_obj_grad_np(X, s, w, b, lam):
    m = s * (X @ w + b)
    obj = np.logaddexp(0.0, -m).mean() + 0.5 * lam * (w @ w)
    # sigmoid(-m), evaluated without overflow
    sig = np.where(m >= 0, np.exp(-np.abs(m)) / (1.0 + np.exp(-np.abs(m))),
                   1.0 / (1.0 + np.exp(-np.abs(m))))
    coef = -s * sig
    return obj, X.T @ coef / X.shape[0] + lam * w, coef.mean()


def _logreg_np(X, s, lam, max_iter, tol):
    w = np.zeros(X.shape[1])
    b = 0.0
    obj, gw, gb = _logreg_obj_grad_np(X, s, w, b, lam)
    step = 1.0
    it = 0
    while it < max_iter:
        if max(np.abs(gw).max(initial=0.0), abs(gb)) < tol:
            break
        gsq = gw @ gw + gb * gb
        step *= 2.0
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            obj_new, gw_new, gb_new = _logreg_obj_grad_np(X, s, w_new, b_new, lam)
            if obj_new <= obj - 0.5 * step * gsq or step < 1e-20:
                break
            step *= 0.5
        w, b, obj, gw, gb = w_new, b_new, obj_new, gw_new, gb_new
        it += 1
    return w, b, it


def logreg_gd(X, signs, lam, max_iter=1000, tol=1e-6):
    """Minimise ``mean(log(1 + exp(-s * (Xw + b)))) + lam/2 * |w|^2``.

    ``signs`` holds +1 / -1 per row. Returns ``(w, b, iterations)``.
    The intercept is not penalised.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    s = np.ascontiguousarray(signs, dtype=np.float64)
    if get_backend() == "numba":
        return _logreg_nb(X, s, float(lam), int(max_iter), float(tol))
    return _logreg_np(X, s, float(lam), int(max_iter), float(tol))


# --------------------------------------------------------------------------
# linear SVM, full-batch Pegasos subgradient steps with a regularised bias


@njit
def _pegasos_nb(X, s, lam, n_iter):
    n, p = X.shape
    w = np.zeros(p + 1)
    acc = np.zeros(p + 1)
    radius = 1.0 / math.sqrt(lam)
    for t in range(1, n_iter + 1):
        eta = 1.0 / (lam * t)
        for c in range(p + 1):
            acc[c] = 0.0
        for i in range(n):
            z = w[p]
            for c in range(p):
                z += X[i, c] * w[c]
            if s[i] * z < 1.0:
                for c in range(p):
                    acc[c] += s[i] * X[i, c]
                acc[p] += s[i]
        shrink = 1.0 - 1.0 / t
        norm = 0.0
        for c in range(p + 1):
            w[c] = shrink * w[c] + (eta / n) * acc[c]
            norm += w[c] * w[c]
        norm = math.sqrt(norm)
        if norm > radius:
            scale = radius / norm
            for c in range(p + 1):
                w[c] *= scale
    return w[:p].copy(), w[p]


def _pegasos_np(X, s, lam, n_iter):
    n = X.shape[0]
    Xa = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(Xa.shape[1])
    radius = 1.0 / math.sqrt(lam)
    for t in range(1, n_iter + 1):
        eta = 1.0 / (lam * t)
        viol = s * (Xa @ w) < 1.0
        acc = (s[viol, None] * Xa[viol]).sum(axis=0)
        w = (1.0 - 1.0 / t) * w + (eta / n) * acc
        norm = math.sqrt(w @ w)
        if norm > radius:
            w = w * (radius / norm)
    return w[:-1].copy(), float(w[-1])


def svm_pegasos(X, signs, lam, n_iter=2000):
    """Full-batch subgradient descent on ``lam/2 |w|^2 + mean(hinge)``.

    Step size ``1/(lam t)``; iterates are projected onto the ball of radius
    ``1/sqrt(lam)``. The bias is a constant input column and is regularised.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    s = np.ascontiguousarray(signs, dtype=np.float64)
    if get_backend() == "numba":
        return _pegasos_nb(X, s, float(lam), int(n_iter))
    return _pegasos_np(X, s, float(lam), int(n_iter))


# --------------------------------------------------------------------------
# CART tree with Gini impurity


@njit
def _splitmix_nb(state):
    state = state + np.uint64(_GOLDEN)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return state, z ^ (z >> np.uint64(31))


def _splitmix_py(state):
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


def node_stream_seed(seed, node):
    """Initial splitmix64 state of a tree node (shared by both backends)."""
    return (int(seed) ^ (((node + 1) * _GOLDEN) & _MASK64)) & _MASK64


@njit
def _fit_tree_nb(X, y, idx, mtry, seed):
    p = X.shape[1]
    m = idx.size
    cap = 2 * m - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    order = idx.copy()
    buf = np.empty(m, dtype=np.int64)
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    perm = np.empty(p, dtype=np.int64)
    vals = np.empty(m)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        nn = end - start
        cp = 0
        for i in range(start, end):
            cp += y[order[i]]
        value[node] = cp / nn
        if cp == 0 or cp == nn:
            continue
        for j in range(p):
            perm[j] = j
        state = seed ^ (np.uint64(node + 1) * np.uint64(_GOLDEN))
        best_imp = np.inf
        best_f = -1
        best_thr = 0.0
        j = 0
        while j < p:
            state, r = _splitmix_nb(state)
            r = np.int64(r % np.uint64(p - j))
            tmp = perm[j]
            perm[j] = perm[j + r]
            perm[j + r] = tmp
            f = perm[j]
            for i in range(nn):
                vals[i] = X[order[start + i], f]
            srt = np.argsort(vals[:nn], kind="mergesort")
            cl = 0
            for q in range(nn - 1):
                cl += y[order[start + srt[q]]]
                v0 = vals[srt[q]]
                v1 = vals[srt[q + 1]]
                if v0 < v1:
                    nl = q + 1
                    nr = nn - nl
                    cr = cp - cl
                    pl = cl / nl
                    pr = cr / nr
                    gl = 2.0 * pl * (1.0 - pl)
                    gr = 2.0 * pr * (1.0 - pr)
                    imp = (nl * gl + nr * gr) / nn
                    if imp < best_imp:
                        best_imp = imp
                        best_f = f
                        thr = (v0 + v1) * 0.5
                        if thr >= v1:
                            thr = v0
                        best_thr = thr
            j += 1
            if j >= mtry and best_f >= 0:
                break
        if best_f < 0:
            continue
        nl = 0
        for i in range(start, end):
            if X[order[i], best_f] <= best_thr:
                buf[nl] = order[i]
                nl += 1
        k = nl
        for i in range(start, end):
            if X[order[i], best_f] > best_thr:
                buf[k] = order[i]
                k += 1
        for i in range(nn):
            order[start + i] = buf[i]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        st_node[sp] = rc
        st_start[sp] = start + nl
        st_end[sp] = end
        sp += 1
        st_node[sp] = lc
        st_start[sp] = start
        st_end[sp] = start + nl
        sp += 1
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


def _best_split_np(column, labels, cp):
    nn = column.size
    srt = np.argsort(column, kind="stable")
    v = column[srt]
    cl = np.cumsum(labels[srt])[:-1]
    nl = np.arange(1, nn)
    nr = nn - nl
    cr = cp - cl
    pl = cl / nl
    pr = cr / nr
    gl = 2.0 * pl * (1.0 - pl)
    gr = 2.0 * pr * (1.0 - pr)
    imp = (nl * gl + nr * gr) / nn
    imp[~(v[:-1] < v[1:])] = np.inf
    q = int(np.argmin(imp))
    if not np.isfinite(imp[q]):
        return np.inf, 0.0
    thr = (v[q] + v[q + 1]) * 0.5
    if thr >= v[q + 1]:
        thr = v[q]
    return imp[q], thr


def _fit_tree_np(X, y, idx, mtry, seed):
    p = X.shape[1]
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    stack = [(0, idx)]
    while stack:
        node, rows = stack.pop()
        labels = y[rows]
        cp = int(labels.sum())
        value[node] = cp / rows.size
        if cp == 0 or cp == rows.size:
            continue
        perm = list(range(p))
        state = node_stream_seed(seed, node)
        best_imp, best_f, best_thr = np.inf, -1, 0.0
        j = 0
        while j < p:
            state, r = _splitmix_py(state)
            r = r % (p - j)
            perm[j], perm[j + r] = perm[j + r], perm[j]
            f = perm[j]
            imp, thr = _best_split_np(X[rows, f], labels, cp)
            if imp < best_imp:
                best_imp, best_f, best_thr = imp, f, thr
            j += 1
            if j >= mtry and best_f >= 0:
                break
        if best_f < 0:
            continue
        go_left = X[rows, best_f] <= best_thr
        lc = len(feature)
        for lst, fill in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.extend([fill, fill])
        feature[node], threshold[node] = best_f, best_thr
        left[node], right[node] = lc, lc + 1
        stack.append((lc + 1, rows[~go_left]))
        stack.append((lc, rows[go_left]))
    return (np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(value))


def fit_tree(X, y, idx, mtry, seed):
    """Grow an unpruned Gini tree on rows ``idx`` (repeats allowed).

    At every internal node features are visited in a splitmix64-driven
    Fisher-Yates order; the first ``mtry`` are scored and, if none of them
    can split, further features are tried. Returns flat node arrays
    ``(feature, threshold, left, right, value)``; ``value`` is the fraction of
    positive rows reaching the node and ``feature == -1`` marks a leaf.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot grow a tree on zero rows")
    mtry = max(1, min(int(mtry), X.shape[1]))
    seed = int(seed) & _MASK64
    if get_backend() == "numba":
        return _fit_tree_nb(X, y, idx, mtry, np.uint64(seed))
    return _fit_tree_np(X, y, idx, mtry, seed)


@njit
def _tree_apply_nb(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


def _tree_apply_np(feature, threshold, left, right, value, X):
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[active]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node]


def tree_apply(tree, X):
    """Leaf value reached by every row of ``X``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if get_backend() == "numba":
        return _tree_apply_nb(*tree, X)
    return _tree_apply_np(*tree, X)


@njit
def _fit_forest_nb(X, y, boot, mtry, seeds):
    n_trees, m = boot.shape
    cap = 2 * m - 1
    feature = np.full((n_trees, cap), -1, dtype=np.int64)
    threshold = np.zeros((n_trees, cap))
    left = np.full((n_trees, cap), -1, dtype=np.int64)
    right = np.full((n_trees, cap), -1, dtype=np.int64)
    value = np.zeros((n_trees, cap))
    for t in range(n_trees):
        f, th, lc, rc, v = _fit_tree_nb(X, y, boot[t].copy(), mtry, seeds[t])
        k = f.size
        feature[t, :k] = f
        threshold[t, :k] = th
        left[t, :k] = lc
        right[t, :k] = rc
        value[t, :k] = v
    return feature, threshold, left, right, value


@njit
def _forest_votes_nb(feature, threshold, left, right, value, X):
    votes = np.zeros(X.shape[0])
    for t in range(feature.shape[0]):
        for i in range(X.shape[0]):
            node = 0
            while feature[t, node] >= 0:
                if X[i, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            if value[t, node] >= 0.5:
                votes[i] += 1.0
    return votes


def fit_forest(X, y, boot, mtry, seeds):
    """Grow one tree per row of ``boot`` (row indices) with the matching seed.

    Tree-for-tree identical to calling :func:`fit_tree` in a loop. Returns a
    list of trees on the numpy backend and a tuple of stacked, padded node
    arrays on the numba backend; :func:`forest_votes` accepts either.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    boot = np.ascontiguousarray(boot, dtype=np.int64)
    if boot.ndim != 2 or boot.shape[1] == 0:
        raise ValueError("need a (n_trees, n_rows) index matrix with at least one row per tree")
    mtry = max(1, min(int(mtry), X.shape[1]))
    seeds = [int(s) & _MASK64 for s in seeds]
    if get_backend() == "numba":
        return _fit_forest_nb(X, y, boot, mtry, np.array(seeds, dtype=np.uint64))
    return [_fit_tree_np(X, y, b, mtry, s) for b, s in zip(boot, seeds)]


def forest_votes(forest, X):
    """Number of trees whose leaf for each row of ``X`` holds a Patient majority (>= 0.5)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if isinstance(forest, tuple):
        return _forest_votes_nb(*forest, X)
    votes = np.zeros(X.shape[0])
    for tree in forest:
        votes += tree_apply(tree, X) >= 0.5
    return votes
