"""Hot loops: split search, breadth-first tree growth, ensemble prediction.

Every function here is valid numba nopython code.  With numba disabled
(``HETFOREST_DISABLE_NUMBA=1``) the split searches and the predictor switch
to vectorised numpy twins that reproduce the loop arithmetic operation for
operation (sequential prefix sums, same expression order), so fitted trees
are bit-identical across the two paths.

Trees are stored as flat node arrays.  ``feat < 0`` marks a leaf; child
indices are local to the tree.  Node depth counts the root as 1, so the
root split is a depth-1 split.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, jit

# splitmix64
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_S32 = np.uint64(32)

# relative margin for "strictly better" comparisons between split scores
SPLIT_TOL = 1e-11

NO_LIMIT = 1 << 30


@jit
def rng_next(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@jit
def rng_below(state, k):
    """Integer in [0, k) by multiply-shift on the top 32 bits (k < 2**32)."""
    hi = rng_next(state) >> _S32
    return np.int64((hi * np.uint64(k)) >> _S32)


@jit
def _midpoint(lo, hi):
    t = 0.5 * (lo + hi)
    if t >= hi:
        t = lo
    return t


# ---------------------------------------------------------------- causal --

@jit
def causal_split_sorted_loop(xs, ys, ds, nt, nc, st, sc, min_leaf, min_tc):
    """Best threshold on one sorted feature for the effect-variance score.

    Score of a split is n_L * tau_L**2 + n_R * tau_R**2 where tau is the
    treated-minus-control difference in means.  ``nt, nc, st, sc`` are the
    node's treated/control counts and outcome sums.  Returns (-inf, nan)
    when no admissible threshold exists.
    """
    m = xs.shape[0]
    best = -np.inf
    thr = np.nan
    lt = 0
    lc = 0
    slt = 0.0
    slc = 0.0
    for i in range(m - 1):
        w = ds[i]
        lt += w
        lc += 1 - w
        slt += w * ys[i]
        slc += (1 - w) * ys[i]
        if xs[i] == xs[i + 1]:
            continue
        nl = i + 1
        nr = m - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        rt = nt - lt
        rc = nc - lc
        if lt < min_tc or lc < min_tc or rt < min_tc or rc < min_tc:
            continue
        tl = slt / lt - slc / lc
        tr = (st - slt) / rt - (sc - slc) / rc
        crit = nl * tl * tl + nr * tr * tr
        if crit > best:
            best = crit
            thr = _midpoint(xs[i], xs[i + 1])
    return best, thr


def causal_split_sorted_np(xs, ys, ds, nt, nc, st, sc, min_leaf, min_tc):
    m = xs.shape[0]
    if m < 2:
        return -np.inf, np.nan
    treated = ds == 1
    cst = np.cumsum(np.where(treated, ys, 0.0))
    csc = np.cumsum(np.where(treated, 0.0, ys))
    cnt_t = np.cumsum(treated)
    cnt_c = np.arange(1, m + 1) - cnt_t
    lt, lc, slt, slc = cnt_t[:-1], cnt_c[:-1], cst[:-1], csc[:-1]
    nl = np.arange(1, m)
    nr = m - nl
    rt, rc = nt - lt, nc - lc
    ok = (xs[:-1] != xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
    ok &= (lt >= min_tc) & (lc >= min_tc) & (rt >= min_tc) & (rc >= min_tc)
    if not ok.any():
        return -np.inf, np.nan
    idx = np.flatnonzero(ok)
    lt, lc, slt, slc, nl, nr, rt, rc = (a[idx] for a in (lt, lc, slt, slc, nl, nr, rt, rc))
    tl = slt / lt - slc / lc
    tr = (st - slt) / rt - (sc - slc) / rc
    crit = nl * tl * tl + nr * tr * tr
    k = int(np.argmax(crit))
    i = idx[k]
    return float(crit[k]), float(_midpoint(xs[i], xs[i + 1]))


@jit
def causal_split_binary_loop(xv, ys, ds, nt, nc, st, sc, min_leaf, min_tc):
    """Single candidate split of a 0/1 column: zeros left, ones right."""
    m = xv.shape[0]
    lt = 0
    lc = 0
    slt = 0.0
    slc = 0.0
    for i in range(m):
        w = np.int64(xv[i] <= 0.5)
        wt = w * ds[i]
        wc = w - wt
        lt += wt
        lc += wc
        slt += wt * ys[i]
        slc += wc * ys[i]
    nl = lt + lc
    nr = m - nl
    rt = nt - lt
    rc = nc - lc
    if nl < min_leaf or nr < min_leaf or nl == 0 or nr == 0:
        return -np.inf, np.nan
    if lt < min_tc or lc < min_tc or rt < min_tc or rc < min_tc:
        return -np.inf, np.nan
    tl = slt / lt - slc / lc
    tr = (st - slt) / rt - (sc - slc) / rc
    return nl * tl * tl + nr * tr * tr, 0.5


def causal_split_binary_np(xv, ys, ds, nt, nc, st, sc, min_leaf, min_tc):
    m = xv.shape[0]
    if m == 0:
        return -np.inf, np.nan
    treated = ds == 1
    left = xv <= 0.5
    slt = np.cumsum(np.where(treated & left, ys, 0.0))[-1]
    slc = np.cumsum(np.where(~treated & left, ys, 0.0))[-1]
    lt = int((treated & left).sum())
    lc = int((~treated & left).sum())
    nl = lt + lc
    nr = m - nl
    rt, rc = nt - lt, nc - lc
    if nl < min_leaf or nr < min_leaf or nl == 0 or nr == 0:
        return -np.inf, np.nan
    if lt < min_tc or lc < min_tc or rt < min_tc or rc < min_tc:
        return -np.inf, np.nan
    tl = slt / lt - slc / lc
    tr = (st - slt) / rt - (sc - slc) / rc
    return float(nl * tl * tl + nr * tr * tr), 0.5


# ------------------------------------------------------------ regression --

@jit
def regression_split_sorted_loop(xs, ys, s, min_leaf):
    """Best threshold for squared error; score is s_L**2/n_L + s_R**2/n_R.

    Maximising that score is the same as minimising the two-child sum of
    squared deviations from the child means.  ``s`` is the node outcome sum.
    """
    m = xs.shape[0]
    best = -np.inf
    thr = np.nan
    sl = 0.0
    for i in range(m - 1):
        sl += ys[i]
        if xs[i] == xs[i + 1]:
            continue
        nl = i + 1
        nr = m - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        sr = s - sl
        crit = sl * sl / nl + sr * sr / nr
        if crit > best:
            best = crit
            thr = _midpoint(xs[i], xs[i + 1])
    return best, thr


def regression_split_sorted_np(xs, ys, s, min_leaf):
    m = xs.shape[0]
    if m < 2:
        return -np.inf, np.nan
    cs = np.cumsum(ys)
    sl = cs[:-1]
    nl = np.arange(1, m)
    nr = m - nl
    ok = (xs[:-1] != xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not ok.any():
        return -np.inf, np.nan
    idx = np.flatnonzero(ok)
    sl, nl, nr = sl[idx], nl[idx], nr[idx]
    sr = s - sl
    crit = sl * sl / nl + sr * sr / nr
    k = int(np.argmax(crit))
    i = idx[k]
    return float(crit[k]), float(_midpoint(xs[i], xs[i + 1]))


@jit
def regression_split_binary_loop(xv, ys, s, min_leaf):
    m = xv.shape[0]
    sl = 0.0
    nl = 0
    for i in range(m):
        w = np.int64(xv[i] <= 0.5)
        nl += w
        sl += w * ys[i]
    nr = m - nl
    if nl < min_leaf or nr < min_leaf or nl == 0 or nr == 0:
        return -np.inf, np.nan
    sr = s - sl
    return sl * sl / nl + sr * sr / nr, 0.5


def regression_split_binary_np(xv, ys, s, min_leaf):
    m = xv.shape[0]
    if m == 0:
        return -np.inf, np.nan
    left = xv <= 0.5
    sl = np.cumsum(np.where(left, ys, 0.0))[-1]
    nl = int(left.sum())
    nr = m - nl
    if nl < min_leaf or nr < min_leaf or nl == 0 or nr == 0:
        return -np.inf, np.nan
    sr = s - sl
    return float(sl * sl / nl + sr * sr / nr), 0.5


if USE_NUMBA:
    causal_split_sorted = causal_split_sorted_loop
    causal_split_binary = causal_split_binary_loop
    regression_split_sorted = regression_split_sorted_loop
    regression_split_binary = regression_split_binary_loop
else:
    causal_split_sorted = causal_split_sorted_np
    causal_split_binary = causal_split_binary_np
    regression_split_sorted = regression_split_sorted_np
    regression_split_binary = regression_split_binary_np


# ---------------------------------------------------------------- growth --

@jit
def _better(crit, best, have_best):
    if not have_best:
        return crit > -np.inf
    return crit > best + SPLIT_TOL * abs(best)


@jit
def new_workspace(n, cap, k, mtry, n_cont):
    iw = np.empty(2 * n + 2 * cap + k + mtry + n + n + 2, np.int64)
    fw = np.empty(3 * n)
    presorted = np.empty((n_cont, n), np.int64)
    return iw, fw, presorted


@jit
def continuous_slots(is_binary):
    """Map each column to its row in the presorted buffer (-1 for 0/1 columns)."""
    p = is_binary.shape[0]
    slot = np.full(p, -1, np.int64)
    c = 0
    for j in range(p):
        if not is_binary[j]:
            slot[j] = c
            c += 1
    return slot


@jit
def _stable_partition(idx, tmp, a, b, xj, thr):
    """Reorder idx[a:b] so rows with xj <= thr come first; returns that count.

    ``tmp`` must extend at least one element past ``b``.
    """
    q = a
    for r in range(a, b):
        v = idx[r]
        tmp[q] = v
        q += np.int64(xj[v] <= thr)
    nl = q - a
    for r in range(a, b):
        v = idx[r]
        tmp[q] = v
        q += np.int64(not xj[v] <= thr)
    for r in range(a, b):
        idx[r] = tmp[r]
    return nl


def dense_ranks(XT, slot):
    """Dense rank of every row within each continuous column (ties share a rank)."""
    n_cont = int((slot >= 0).sum())
    ranks = np.zeros((n_cont, XT.shape[1]), np.int64)
    for j in np.flatnonzero(slot >= 0):
        _, inv = np.unique(XT[j], return_inverse=True)
        ranks[slot[j]] = inv
    return ranks


@jit
def grow_tree(XT, ranks, y, d, s_rows, e_rows, features, mtry, is_binary, slot, causal,
              min_leaf, min_tc, max_depth, estimate, state, iw, fw, presorted,
              feat, thr, left, right, parent, depth,
              n_tot, n_t, n_c, mean_t, mean_c, tau, mean_y, cand):
    """Grow one tree breadth-first on ``s_rows``; estimate leaves on ``e_rows``.

    ``XT`` is the feature-major (p, n) covariate matrix.  Node buffers are
    written in place and the node count is returned.  ``iw``/``fw``/
    ``presorted`` are scratch buffers from :func:`new_workspace`; ``slot``
    comes from :func:`continuous_slots` and ``ranks`` from
    :func:`dense_ranks`.  Rows of continuous columns are counting-sorted
    once per tree and stably partitioned at each split, which gives the
    same order as a stable sort of every node's rows.  ``cand`` is either empty or
    a (capacity, mtry) array that receives each split node's candidate
    features.  Breadth-first order means a run capped at ``max_depth=k``
    reproduces the first k levels of an uncapped run exactly.
    """
    cap = feat.shape[0]
    m0 = s_rows.shape[0]
    k = features.shape[0]
    rows = iw[:m0]
    # one spare slot: the branchless partition may write one past the range
    tmp = iw[m0:2 * m0 + 1]
    start = iw[2 * m0 + 1:2 * m0 + 1 + cap]
    stop = iw[2 * m0 + 1 + cap:2 * m0 + 1 + 2 * cap]
    o = 2 * m0 + 1 + 2 * cap
    pool = iw[o:o + k]
    picked = iw[o + k:o + k + mtry]
    ds = iw[o + k + mtry:o + k + mtry + m0]
    n_all = XT.shape[1]
    bucket = iw[o + k + mtry + m0:o + k + mtry + m0 + n_all + 1]
    ys = fw[:m0]
    xv = fw[m0:2 * m0]
    for r in range(m0):
        rows[r] = s_rows[r]
    for r in range(k):
        pool[r] = features[r]
    record = cand.shape[0] > 0
    xsy = fw[2 * m0:3 * m0]
    xsd = tmp
    for j in range(is_binary.shape[0]):
        c = slot[j]
        if c < 0:
            continue
        rk = ranks[c]
        for r in range(n_all + 1):
            bucket[r] = 0
        for r in range(m0):
            bucket[rk[rows[r]] + 1] += 1
        for r in range(n_all):
            bucket[r + 1] += bucket[r]
        out = presorted[c]
        for r in range(m0):
            row = rows[r]
            q = rk[row]
            out[bucket[q]] = row
            bucket[q] += 1

    start[0] = 0
    stop[0] = m0
    depth[0] = 1
    parent[0] = -1
    n_nodes = 1
    i = 0
    while i < n_nodes:
        a = start[i]
        b = stop[i]
        m = b - a
        feat[i] = -1
        left[i] = -1
        right[i] = -1
        thr[i] = np.nan
        can_split = depth[i] <= max_depth and m >= 2 * min_leaf and n_nodes + 2 <= cap
        parent_crit = 0.0
        nt = 0
        nc = 0
        st = 0.0
        sc = 0.0
        s = 0.0
        if can_split:
            for r in range(m):
                row = rows[a + r]
                yr = y[row]
                w = d[row]
                ys[r] = yr
                ds[r] = w
                nt += w
                st += w * yr
                sc += (1 - w) * yr
                s += yr
            nc = m - nt
            if causal:
                if nt < 2 * min_tc or nc < 2 * min_tc:
                    can_split = False
                else:
                    tp = st / nt - sc / nc
                    parent_crit = m * tp * tp
            else:
                parent_crit = s * s / m
        if can_split:
            for t in range(mtry):
                r = t + rng_below(state, k - t)
                tmpf = pool[t]
                pool[t] = pool[r]
                pool[r] = tmpf
                picked[t] = pool[t]
            picked.sort()
            if record:
                for t in range(mtry):
                    cand[i, t] = picked[t]
            yv = ys[:m]
            dv = ds[:m]
            xm = xv[:m]
            best = -np.inf
            have_best = False
            bf = -1
            bthr = np.nan
            for c in range(mtry):
                j = picked[c]
                xj = XT[j]
                if slot[j] < 0:
                    for r in range(m):
                        xm[r] = xj[rows[a + r]]
                    if causal:
                        crit, t_ = causal_split_binary(xm, yv, dv, nt, nc, st, sc, min_leaf, min_tc)
                    else:
                        crit, t_ = regression_split_binary(xm, yv, s, min_leaf)
                else:
                    srt = presorted[slot[j]]
                    for r in range(m):
                        row = srt[a + r]
                        xm[r] = xj[row]
                        xsy[r] = y[row]
                        xsd[r] = d[row]
                    if causal:
                        crit, t_ = causal_split_sorted(xm, xsy[:m], xsd[:m],
                                                       nt, nc, st, sc, min_leaf, min_tc)
                    else:
                        crit, t_ = regression_split_sorted(xm, xsy[:m], s, min_leaf)
                if _better(crit, best, have_best):
                    best = crit
                    have_best = True
                    bf = j
                    bthr = t_
            if have_best and best > parent_crit + SPLIT_TOL * abs(parent_crit):
                xj = XT[bf]
                nl = _stable_partition(rows, tmp, a, b, xj, bthr)
                for jj in range(is_binary.shape[0]):
                    c = slot[jj]
                    if c < 0:
                        continue
                    _stable_partition(presorted[c], tmp, a, b, xj, bthr)
                feat[i] = bf
                thr[i] = bthr
                lc = n_nodes
                rc = n_nodes + 1
                left[i] = lc
                right[i] = rc
                start[lc] = a
                stop[lc] = a + nl
                start[rc] = a + nl
                stop[rc] = b
                depth[lc] = depth[i] + 1
                depth[rc] = depth[i] + 1
                parent[lc] = i
                parent[rc] = i
                n_nodes += 2
        i += 1

    if not estimate:
        for q in range(n_nodes):
            n_tot[q] = 0
            n_t[q] = 0
            n_c[q] = 0
            mean_t[q] = np.nan
            mean_c[q] = np.nan
            tau[q] = np.nan
            mean_y[q] = np.nan
        return n_nodes

    sum_t = np.zeros(n_nodes)
    sum_c = np.zeros(n_nodes)
    sum_a = np.zeros(n_nodes)
    cnt_t = np.zeros(n_nodes, np.int64)
    cnt_c = np.zeros(n_nodes, np.int64)
    for r in range(e_rows.shape[0]):
        row = e_rows[r]
        node = 0
        while True:
            if d[row] == 1:
                cnt_t[node] += 1
                sum_t[node] += y[row]
            else:
                cnt_c[node] += 1
                sum_c[node] += y[row]
            sum_a[node] += y[row]
            if feat[node] < 0:
                break
            if XT[feat[node], row] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
    for q in range(n_nodes):
        n_t[q] = cnt_t[q]
        n_c[q] = cnt_c[q]
        n_tot[q] = cnt_t[q] + cnt_c[q]
        mean_t[q] = sum_t[q] / cnt_t[q] if cnt_t[q] > 0 else np.nan
        mean_c[q] = sum_c[q] / cnt_c[q] if cnt_c[q] > 0 else np.nan
        mean_y[q] = sum_a[q] / n_tot[q] if n_tot[q] > 0 else np.nan
        tau[q] = mean_t[q] - mean_c[q]
    # nearest ancestor with usable estimation rows
    for q in range(n_nodes):
        a_ = q
        while a_ >= 0 and (cnt_t[a_] == 0 or cnt_c[a_] == 0):
            a_ = parent[a_]
        if a_ != q:
            tau[q] = tau[a_] if a_ >= 0 else np.nan
        a_ = q
        while a_ >= 0 and cnt_t[a_] + cnt_c[a_] == 0:
            a_ = parent[a_]
        if a_ != q:
            mean_y[q] = mean_y[a_] if a_ >= 0 else np.nan
    return n_nodes


@jit
def fit_tree_chunk(XT, ranks, y, d, features, mtry, is_binary, slot, causal, min_leaf, min_tc,
                   max_depth, honest, estimate, tree_seeds, tree_bags, bag_rows,
                   sub_size, cap):
    """Fit a block of forest trees into ``cap``-sized node slots.

    Each tree draws ``sub_size`` rows without replacement, from its bag's
    half-sample when ``bag_rows`` is non-empty and from all rows otherwise;
    with honesty the first ceil(sub_size/2) drawn rows shape the tree and
    the rest estimate the leaves.  Subsample rows are returned in draw order.
    """
    n = XT.shape[1]
    T = tree_seeds.shape[0]
    total = T * cap
    feat = np.empty(total, np.int64)
    thr = np.empty(total)
    left = np.empty(total, np.int64)
    right = np.empty(total, np.int64)
    parent = np.empty(total, np.int64)
    depth = np.empty(total, np.int64)
    n_tot = np.empty(total, np.int64)
    n_t = np.empty(total, np.int64)
    n_c = np.empty(total, np.int64)
    mean_t = np.empty(total)
    mean_c = np.empty(total)
    tau = np.empty(total)
    mean_y = np.empty(total)
    counts = np.zeros(T, np.int64)
    subs = np.empty((T, sub_size), np.int64)
    state = np.empty(1, np.uint64)
    no_cand = np.empty((0, 0), np.int64)
    use_bags = bag_rows.shape[0] > 0
    pool = np.empty(n, np.int64)
    n_cont = 0
    for j in range(slot.shape[0]):
        if slot[j] >= 0:
            n_cont += 1
    iw, fw, presorted = new_workspace(n, cap, features.shape[0], mtry, n_cont)
    for t in range(T):
        state[0] = tree_seeds[t]
        if use_bags:
            src = bag_rows[tree_bags[t]]
            L = src.shape[0]
            for q in range(L):
                pool[q] = src[q]
        else:
            L = n
            for q in range(n):
                pool[q] = q
        for q in range(sub_size):
            r = q + rng_below(state, L - q)
            tmp = pool[q]
            pool[q] = pool[r]
            pool[r] = tmp
        sub = subs[t]
        for q in range(sub_size):
            sub[q] = pool[q]
        if honest:
            ns = (sub_size + 1) // 2
            s_rows = sub[:ns]
            e_rows = sub[ns:]
        else:
            s_rows = sub
            e_rows = sub
        o = t * cap
        e = o + cap
        counts[t] = grow_tree(XT, ranks, y, d, s_rows, e_rows, features, mtry, is_binary, slot, causal,
                              min_leaf, min_tc, max_depth, estimate, state, iw, fw, presorted,
                              feat[o:e], thr[o:e], left[o:e], right[o:e], parent[o:e],
                              depth[o:e], n_tot[o:e], n_t[o:e], n_c[o:e], mean_t[o:e],
                              mean_c[o:e], tau[o:e], mean_y[o:e], no_cand)
    return (feat, thr, left, right, parent, depth, n_tot, n_t, n_c,
            mean_t, mean_c, tau, mean_y, counts, subs)


# ------------------------------------------------------------ prediction --

@jit
def _bag_variance(preds, tree_bags, n_bags, bag_size, floor):
    bag_sum = np.zeros(n_bags)
    bag_cnt = np.zeros(n_bags, np.int64)
    for t in range(preds.shape[0]):
        v = preds[t]
        if v == v:
            bag_sum[tree_bags[t]] += v
            bag_cnt[tree_bags[t]] += 1
    n_valid = 0
    tot = 0.0
    bag_mean = np.empty(n_bags)
    for g in range(n_bags):
        if bag_cnt[g] >= 2:
            bag_mean[g] = bag_sum[g] / bag_cnt[g]
            tot += bag_mean[g]
            n_valid += 1
        else:
            bag_mean[g] = np.nan
    if n_valid < 2:
        return floor
    grand = tot / n_valid
    between = 0.0
    for g in range(n_bags):
        if bag_cnt[g] >= 2:
            dv = bag_mean[g] - grand
            between += dv * dv
    between = between / (n_valid - 1)
    within = 0.0
    dof = 0
    for t in range(preds.shape[0]):
        g = tree_bags[t]
        v = preds[t]
        if v == v and bag_cnt[g] >= 2:
            dv = v - bag_mean[g]
            within += dv * dv
    for g in range(n_bags):
        if bag_cnt[g] >= 2:
            dof += bag_cnt[g] - 1
    within = within / dof
    var = between - within / bag_size
    if var < floor:
        var = floor
    return var


@jit
def predict_loop(Xq, feat, thr, left, right, values, offsets, tree_bags, n_bags,
                 bag_size, want_var, floor):
    """Tree-averaged prediction and little-bags variance for each query row."""
    nq = Xq.shape[0]
    T = offsets.shape[0] - 1
    out = np.empty(nq)
    var = np.full(nq, np.nan)
    preds = np.empty(T)
    for q in range(nq):
        tot = 0.0
        cnt = 0
        for t in range(T):
            base = offsets[t]
            node = base
            while feat[node] >= 0:
                if Xq[q, feat[node]] <= thr[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            v = values[node]
            preds[t] = v
            if v == v:
                tot += v
                cnt += 1
        out[q] = tot / cnt if cnt > 0 else np.nan
        if want_var:
            var[q] = _bag_variance(preds, tree_bags, n_bags, bag_size, floor)
    return out, var


@jit
def tree_predictions(Xq, feat, thr, left, right, values, offsets):
    """(rows, trees) matrix of per-tree leaf values."""
    nq = Xq.shape[0]
    T = offsets.shape[0] - 1
    out = np.empty((nq, T))
    for q in range(nq):
        for t in range(T):
            base = offsets[t]
            node = base
            while feat[node] >= 0:
                if Xq[q, feat[node]] <= thr[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[q, t] = values[node]
    return out


def tree_predictions_np(Xq, feat, thr, left, right, values, offsets):
    nq = Xq.shape[0]
    T = offsets.shape[0] - 1
    out = np.empty((nq, T))
    rows = np.arange(nq)
    for t in range(T):
        base = offsets[t]
        node = np.full(nq, base, dtype=np.int64)
        active = feat[node] >= 0
        while active.any():
            f = feat[node[active]]
            go_left = Xq[rows[active], f] <= thr[node[active]]
            nxt = np.where(go_left, left[node[active]], right[node[active]]) + base
            node[active] = nxt
            active = feat[node] >= 0
        out[:, t] = values[node]
    return out


def predict_np(Xq, feat, thr, left, right, values, offsets, tree_bags, n_bags,
               bag_size, want_var, floor):
    preds = tree_predictions_np(Xq, feat, thr, left, right, values, offsets)
    nq, T = preds.shape
    tot = np.zeros(nq)
    cnt = np.zeros(nq, dtype=np.int64)
    for t in range(T):
        v = preds[:, t]
        ok = v == v
        tot = np.where(ok, tot + np.where(ok, v, 0.0), tot)
        cnt += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    var = np.full(nq, np.nan)
    if want_var:
        for q in range(nq):
            var[q] = _bag_variance(preds[q], tree_bags, n_bags, bag_size, floor)
    return out, var


predict = predict_loop if USE_NUMBA else predict_np
tree_matrix = tree_predictions if USE_NUMBA else tree_predictions_np
