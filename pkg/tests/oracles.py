"""Independent reference computations used by the tests."""
import numpy as np


def _candidates(x):
    """(feature, threshold, left mask) for every midpoint between distinct values."""
    for j in range(x.shape[1]):
        v = np.unique(x[:, j])
        for lo, hi in zip(v[:-1], v[1:]):
            thr = 0.5 * (lo + hi)
            if thr >= hi:
                thr = lo
            yield j, thr, x[:, j] <= thr


def _pick(scored, larger_better):
    """Best (feature, threshold); near-equal scores go to the lowest feature then threshold."""
    if not scored:
        return None
    vals = np.array([s for _, _, s in scored])
    best = vals.max() if larger_better else vals.min()
    tol = 1e-9 * max(abs(best), 1e-300)
    for j, thr, s in scored:
        if abs(s - best) <= tol:
            return j, thr, s
    raise AssertionError("unreachable")


def regression_root_split(x, y, min_leaf):
    """Minimize the left plus right sum of squared deviations from the side means."""
    scored = []
    for j, thr, left in _candidates(x):
        nl = int(left.sum())
        if nl < min_leaf or len(y) - nl < min_leaf:
            continue
        yl, yr = y[left], y[~left]
        sse = ((yl - yl.mean()) ** 2).sum() + ((yr - yr.mean()) ** 2).sum()
        scored.append((j, thr, sse))
    pick = _pick(scored, larger_better=False)
    parent = ((y - y.mean()) ** 2).sum()
    if pick is None or not pick[2] < parent * (1 - 1e-9):
        return None
    return pick[0], pick[1]


def diff_in_means(y, d):
    return y[d == 1].mean() - y[d == 0].mean()


def causal_root_split(x, y, d, min_leaf, min_tc):
    """Maximize n_L * tau_L**2 + n_R * tau_R**2 over admissible splits."""
    scored = []
    for j, thr, left in _candidates(x):
        ok = True
        for side in (left, ~left):
            nt = int(d[side].sum())
            if side.sum() < min_leaf or nt < min_tc or side.sum() - nt < min_tc:
                ok = False
        if not ok:
            continue
        tl, tr = diff_in_means(y[left], d[left]), diff_in_means(y[~left], d[~left])
        scored.append((j, thr, left.sum() * tl**2 + (~left).sum() * tr**2))
    pick = _pick(scored, larger_better=True)
    parent = len(y) * diff_in_means(y, d) ** 2
    if pick is None or not pick[2] > parent * (1 + 1e-9):
        return None
    return pick[0], pick[1]


def leaf_effects(tree, x_est, y_est, d_est):
    """Difference in means per leaf over estimation rows, ancestor fallback for one-armed leaves."""
    leaf = tree.apply(x_est)
    # every node's estimation rows: a row belongs to all nodes on its path
    members = {i: [] for i in range(tree.n_nodes)}
    for r in range(x_est.shape[0]):
        node = 0
        while True:
            members[node].append(r)
            if tree.feat[node] < 0:
                break
            node = tree.left[node] if x_est[r, tree.feat[node]] <= tree.thr[node] else tree.right[node]
    out = {}
    for q in np.unique(leaf):
        a = q
        while a >= 0:
            rows = np.array(members[a], dtype=int)
            if rows.size and 0 < d_est[rows].sum() < rows.size:
                out[int(q)] = diff_in_means(y_est[rows], d_est[rows])
                break
            a = tree.parent[a]
        else:
            out[int(q)] = np.nan
    return out


def importance_by_hand(split_records, n_vars, max_depth=4):
    """Depth-weighted split shares from explicit (depth, variable) records."""
    w = np.array([1.0 / k**2 for k in range(1, max_depth + 1)])
    num = np.zeros(n_vars)
    for k in range(1, max_depth + 1):
        at_k = [v for dep, v in split_records if dep == k]
        if not at_k:
            continue
        for v in range(n_vars):
            num[v] += at_k.count(v) / len(at_k) * w[k - 1]
    return num / w.sum()


def little_bags_variance(preds, bags, bag_size, floor=1e-12):
    """Between-bag variance of bag means minus within-bag variance over the bag size."""
    groups = [preds[bags == g] for g in np.unique(bags)]
    means = np.array([g.mean() for g in groups])
    between = means.var(ddof=1)
    within = sum(((g - g.mean()) ** 2).sum() for g in groups) / sum(len(g) - 1 for g in groups)
    return max(between - within / bag_size, floor)


def tabulate_features(records, holidays=()):
    """Usage features by plain loops over (datetime, kwh) records."""
    import statistics as st

    def window(ts):
        if ts.hour >= 23 or ts.hour < 8:
            return "night"
        if ts.weekday() < 5 and ts.date() not in holidays and 17 <= ts.hour < 19:
            return "peak"
        return "day"

    def var(v):
        return st.variance(v) if len(v) > 1 else 0.0

    def mean(v):
        return st.fmean(v) if v else float("nan")

    def vnan(v):
        return var(v) if v else float("nan")

    rows = [(ts, k, window(ts), ts.weekday() < 5) for ts, k in records]
    allk = [k for _, k, _, _ in rows]
    out = {"mean_usage": mean(allk), "min_usage": min(allk), "max_usage": max(allk), "var_usage": var(allk)}
    groups = {"peak": lambda w: w == "peak", "nonpeak": lambda w: w != "peak",
              "night": lambda w: w == "night", "day": lambda w: w == "day"}
    for name, f in groups.items():
        v = [k for _, k, w, _ in rows if f(w)]
        out[f"mean_{name}"], out[f"var_{name}"] = mean(v), vnan(v)
    for part, flag in (("weekday", True), ("weekend", False)):
        v = [k for _, k, _, wd in rows if wd == flag]
        out[f"mean_usage_{part}"], out[f"var_usage_{part}"] = mean(v), vnan(v)
        for name in (("peak", "night", "day") if flag else ("night", "day")):
            v = [k for _, k, w, wd in rows if wd == flag and w == name]
            out[f"mean_{name}_{part}"], out[f"var_{name}_{part}"] = mean(v), vnan(v)
    days, slots = {}, {}
    for ts, k, _, _ in rows:
        days.setdefault(ts.date(), []).append(k)
        slots.setdefault(ts.hour * 2 + ts.minute // 30, []).append(k)
    out["mean_daily_max"] = st.fmean(max(v) for v in days.values())
    out["mean_daily_min"] = st.fmean(min(v) for v in days.values())
    cvs = []
    for v in slots.values():
        m = st.fmean(v)
        cvs.append(st.stdev(v) / m if m > 0 and len(v) > 1 else 0.0)
    out["mean_halfhour_cv"] = st.fmean(cvs)
    out["ratio_night_daily"] = out["mean_night"] / out["mean_usage"]
    lunch = [k for ts, k, _, _ in rows if 12 <= ts.hour < 14]
    out["ratio_lunch_daily"] = mean(lunch) / out["mean_usage"]
    for num, name in zip(range(7, 13), ("jul", "aug", "sep", "oct", "nov", "dec")):
        v = [k for ts, k, _, _ in rows if ts.month == num]
        vp = [k for ts, k, w, _ in rows if ts.month == num and w == "peak"]
        out[f"mean_usage_{name}"], out[f"var_usage_{name}"], out[f"var_peak_{name}"] = mean(v), vnan(v), vnan(vp)
    for s in range(48):
        out[f"mean_slot_{s // 2:02d}{30 * (s % 2):02d}"] = mean(slots.get(s, []))
    return out
