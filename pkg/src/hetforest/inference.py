"""Repeated sample-splitting inference on forest effect scores.

Each split halves the data into a main and an auxiliary sample.  A causal
forest and an untreated-only regression forest are trained on the
auxiliary half and evaluated on the main half, giving the proxy effect
score ``S`` and the baseline score ``B``.  Per-split regressions on the
main half are then combined across splits by median aggregation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .data import DataError, Dataset, SeededSampler, split_half_indices
from .forest import ForestParams, fit_causal_forest, fit_regression_forest

SPLIT_LEVEL = 0.95
REPORTED_LEVEL = 0.90

_SPLIT_STREAM = 401


class RankDeficientError(ValueError):
    """Weighted design matrix does not have full column rank."""


@dataclass(frozen=True)
class WlsResult:
    coef: np.ndarray
    cov: np.ndarray
    names: tuple[str, ...]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def contrast(self, a: str, b: str) -> tuple[float, float]:
        """Estimate and standard error of ``coef[a] - coef[b]``."""
        i, j = self.names.index(a), self.names.index(b)
        var = self.cov[i, i] + self.cov[j, j] - 2.0 * self.cov[i, j]
        return float(self.coef[i] - self.coef[j]), math.sqrt(max(var, 0.0))

    def ci(self, level: float = SPLIT_LEVEL) -> tuple[np.ndarray, np.ndarray]:
        z = norm.ppf(0.5 + level / 2.0)
        return self.coef - z * self.se, self.coef + z * self.se

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])


def weighted_ols(X, y, weights=None, names=None) -> WlsResult:
    """Weighted least squares with HC1 standard errors.

    Parameters
    ----------
    X : (n, k) array
        Design matrix, intercept included by the caller if wanted.
    y : (n,) array
    weights : (n,) array, optional
        Positive observation weights; unit weights by default.

    Raises
    ------
    RankDeficientError
        If the weighted design has rank below ``k`` or ``n <= k``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    if n <= k:
        raise RankDeficientError(f"{n} rows cannot identify {k} coefficients")
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    if np.linalg.matrix_rank(Xw) < k:
        raise RankDeficientError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    bread = np.linalg.inv(Xw.T @ Xw)
    meat = (Xw * resid[:, None] ** 2).T @ Xw
    cov = bread @ meat @ bread * (n / (n - k))
    return WlsResult(coef, cov, names)


# ------------------------------------------------------------ aggregation --

@dataclass(frozen=True)
class MedianAggregate:
    """Median-combined estimate across sample splits.

    ``ci_high`` is the lower median of per-split upper bounds and ``ci_low``
    the upper median of per-split lower bounds; per-split intervals at
    level 0.95 combine into an interval reported at level 0.90.
    """

    point: float
    ci_low: float
    ci_high: float
    num_valid_splits: int
    split_level: float = SPLIT_LEVEL
    level: float = REPORTED_LEVEL


def _lower_median(v: np.ndarray) -> float:
    return float(np.sort(v)[(v.size - 1) // 2])


def _upper_median(v: np.ndarray) -> float:
    return float(np.sort(v)[v.size // 2])


def median_aggregate(points, lows, highs) -> MedianAggregate:
    """Combine per-split estimates.

    Bounds may be NaN for splits that could not produce an interval; those
    splits still contribute their point.  Returns NaN bounds when no split
    has bounds.
    """
    points = np.asarray(points, dtype=float)
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    if points.size == 0:
        raise ValueError("no splits to aggregate")
    if not (points.shape == lows.shape == highs.shape):
        raise ValueError("points, lows and highs must have equal length")
    point = 0.5 * (_lower_median(points) + _upper_median(points))
    ok = ~(np.isnan(lows) | np.isnan(highs))
    if ok.any():
        lo, hi = _upper_median(lows[ok]), _lower_median(highs[ok])
    else:
        lo = hi = math.nan
    return MedianAggregate(point, lo, hi, int(points.size))


# ------------------------------------------------------------- splitting --

@dataclass(frozen=True)
class SplitRun:
    """Scores of one main/auxiliary split, evaluated on the main rows."""

    main: np.ndarray
    aux: np.ndarray
    S: np.ndarray
    B: np.ndarray


def run_split(data: Dataset, forest_params: ForestParams, sampler: SeededSampler) -> SplitRun:
    """Train on a random half, score the other half."""
    main, aux = split_half_indices(data.n, sampler)
    aux_data = data.subset(aux)
    if aux_data.n_control == 0:
        raise DataError("auxiliary sample has no untreated rows")
    seeds = sampler.child(1).uint64(2) >> np.uint64(1)
    cf = fit_causal_forest(aux_data, forest_params.with_(seed=int(seeds[0])))
    rf = fit_regression_forest(aux_data.subset(np.flatnonzero(aux_data.d == 0)),
                               forest_params.with_(seed=int(seeds[1])))
    xm = data.x[main]
    return SplitRun(main, aux, cf.predict(xm), rf.predict(xm))


def run_splits(data: Dataset, num_splits: int = 1000,
               forest_params: ForestParams = ForestParams(num_trees=2000, bag_size=1),
               seed: int = 0, workers: int = 1) -> list[SplitRun]:
    """Independent splits, split ``s`` seeded by ``(seed, s)`` regardless of ``workers``."""
    if num_splits < 1:
        raise ValueError("num_splits must be >= 1")

    def one(s):
        return run_split(data, forest_params, SeededSampler(seed, (_SPLIT_STREAM, s)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(num_splits)))
    return [one(s) for s in range(num_splits)]


def group_labels(S, K: int = 4) -> np.ndarray:
    """Quantile groups 1..K of ``S`` by rank; ties broken by row order."""
    S = np.asarray(S)
    m = S.shape[0]
    if m < K:
        raise ValueError(f"{m} rows cannot form {K} groups")
    order = np.argsort(S, kind="stable")
    labels = np.empty(m, dtype=np.int64)
    labels[order] = np.arange(m) * K // m + 1
    return labels


# ------------------------------------------------------------ estimators --

def _propensity(p, shape) -> np.ndarray:
    p = np.broadcast_to(p, shape)
    if not (np.all(p > 0) and np.all(p < 1)):
        raise DataError("propensity must lie strictly between 0 and 1")
    return p


def blp_regression(y, d, p, S, B) -> WlsResult:
    """One-split best linear predictor regression.

    ``y ~ 1 + B + (d - p) + (d - p)(S - mean S)`` with weights
    ``1 / (p (1 - p))``; ``beta2 != 0`` signals effect heterogeneity.
    """
    y, d, p, S, B = (np.asarray(a, dtype=float) for a in (y, d, p, S, B))
    p = _propensity(p, y.shape)
    dp = d - p
    X = np.column_stack([np.ones_like(y), B, dp, dp * (S - S.mean())])
    return weighted_ols(X, y, 1.0 / (p * (1.0 - p)), ("alpha0", "alpha1", "beta1", "beta2"))


def gate_regression(y, d, p, B, groups, K: int = 4, form: str = "interacted") -> WlsResult:
    """One-split group effect regression.

    ``form="interacted"`` fits ``y ~ 1 + B + sum_k gamma_k (d - p) 1(G_k)``,
    so ``gamma_k`` is the average effect in group ``k``.  ``form="printed"``
    fits ``y ~ B + sum_k gamma_k 1(G_k)`` without an intercept.
    """
    y, d, p, B = (np.asarray(a, dtype=float) for a in (y, d, p, B))
    p = _propensity(p, y.shape)
    G = (np.asarray(groups)[:, None] == np.arange(1, K + 1)[None, :]).astype(float)
    gnames = tuple(f"gamma{k}" for k in range(1, K + 1))
    w = 1.0 / (p * (1.0 - p))
    if form == "interacted":
        X = np.column_stack([np.ones_like(y), B, G * (d - p)[:, None]])
        return weighted_ols(X, y, w, ("alpha0", "alpha1") + gnames)
    if form == "printed":
        X = np.column_stack([B, G])
        return weighted_ols(X, y, w, ("alpha1",) + gnames)
    raise ValueError(f"unknown GATE form {form!r}")


def _aggregate(per_split: list[dict[str, tuple[float, float, float]]], names) -> dict[str, MedianAggregate]:
    out = {}
    for name in names:
        vals = np.array([s[name] for s in per_split], dtype=float).reshape(-1, 3)
        out[name] = median_aggregate(vals[:, 0], vals[:, 1], vals[:, 2])
    return out


@dataclass(frozen=True)
class InferenceResult:
    """Aggregated estimates plus per-split values.

    ``splits`` has one row per (valid split, term) with columns
    ``split, term, estimate, ci_low, ci_high``.
    """

    estimates: dict[str, MedianAggregate]
    splits: pd.DataFrame
    num_splits: int

    def to_frame(self) -> pd.DataFrame:
        rows = [{"term": k, "estimate": v.point, "ci_low": v.ci_low, "ci_high": v.ci_high,
                 "num_valid_splits": v.num_valid_splits} for k, v in self.estimates.items()]
        return pd.DataFrame(rows, columns=["term", "estimate", "ci_low", "ci_high", "num_valid_splits"])


def _collect(per_split: list[dict | None], names) -> InferenceResult:
    valid = [(i, s) for i, s in enumerate(per_split) if s is not None]
    if not valid:
        raise RankDeficientError("no split produced a valid regression")
    rows = [(i, t, *s[t]) for i, s in valid for t in names]
    frame = pd.DataFrame(rows, columns=["split", "term", "estimate", "ci_low", "ci_high"])
    return InferenceResult(_aggregate([s for _, s in valid], names), frame, len(per_split))


def _wls_terms(res: WlsResult, terms, z: float) -> dict[str, tuple[float, float, float]]:
    out = {}
    for t in terms:
        j = res.names.index(t)
        c, s = float(res.coef[j]), float(res.se[j])
        out[t] = (c, c - z * s, c + z * s)
    return out


def _z() -> float:
    return float(norm.ppf(0.5 + SPLIT_LEVEL / 2.0))


def _ensure_runs(data, runs, num_splits, forest_params, seed, workers):
    if runs is not None:
        return runs
    return run_splits(data, num_splits, forest_params, seed, workers)


def blp(data: Dataset, num_splits: int = 1000,
        forest_params: ForestParams = ForestParams(num_trees=2000, bag_size=1),
        seed: int = 0, workers: int = 1, runs: list[SplitRun] | None = None) -> InferenceResult:
    """Median-aggregated ``beta1`` (average effect) and ``beta2`` (heterogeneity loading).

    Splits whose regression is rank deficient are dropped; the count of
    kept splits is ``num_valid_splits``.
    """
    runs = _ensure_runs(data, runs, num_splits, forest_params, seed, workers)
    p_all = data.propensity_vector()
    z = _z()
    per = []
    for r in runs:
        try:
            res = blp_regression(data.y[r.main], data.d[r.main], p_all[r.main], r.S, r.B)
        except RankDeficientError:
            per.append(None)
            continue
        per.append(_wls_terms(res, ("beta1", "beta2"), z))
    return _collect(per, ("beta1", "beta2"))


def _gate_terms(res: WlsResult, K: int, z: float) -> dict[str, tuple[float, float, float]]:
    out = _wls_terms(res, [f"gamma{k}" for k in range(1, K + 1)], z)
    diff, se = res.contrast(f"gamma{K}", "gamma1")
    out[f"gamma{K}-gamma1"] = (diff, diff - z * se, diff + z * se)
    return out


def gate(data: Dataset, num_splits: int = 1000, K: int = 4,
         forest_params: ForestParams = ForestParams(num_trees=2000, bag_size=1),
         seed: int = 0, workers: int = 1, runs: list[SplitRun] | None = None,
         form: str = "interacted") -> InferenceResult:
    """Median-aggregated group effects ``gamma1..gammaK`` and ``gammaK - gamma1``.

    Group 1 holds the quarter (for ``K=4``) of main-sample rows with the
    lowest proxy scores.  A split with an empty group or a rank-deficient
    regression is dropped.
    """
    runs = _ensure_runs(data, runs, num_splits, forest_params, seed, workers)
    p_all = data.propensity_vector()
    z = _z()
    names = [f"gamma{k}" for k in range(1, K + 1)] + [f"gamma{K}-gamma1"]
    per = []
    for r in runs:
        y, d, p = data.y[r.main], data.d[r.main], p_all[r.main]
        groups = group_labels(r.S, K)
        if np.bincount(groups, minlength=K + 1)[1:].min() == 0:
            per.append(None)
            continue
        try:
            res = gate_regression(y, d, p, r.B, groups, K, form)
        except RankDeficientError:
            per.append(None)
            continue
        per.append(_gate_terms(res, K, z))
    return _collect(per, names)


def _mean_ci(v: np.ndarray, z: float) -> tuple[float, float, float]:
    m = float(v.mean())
    if v.size < 2:
        return m, math.nan, math.nan
    h = z * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - h, m + h


def _diff_ci(a: np.ndarray, b: np.ndarray, z: float) -> tuple[float, float, float]:
    diff = float(a.mean() - b.mean())
    if a.size < 2 or b.size < 2:
        return diff, math.nan, math.nan
    h = z * math.sqrt(float(a.var(ddof=1)) / a.size + float(b.var(ddof=1)) / b.size)
    return diff, diff - h, diff + h


def clan_columns(data: Dataset) -> dict[str, np.ndarray]:
    """Default CLAN functionals: every expanded covariate column and the outcome."""
    cols = {name: data.x[:, j] for j, name in enumerate(data.schema.column_names())}
    cols["y"] = np.asarray(data.y)
    return cols


def clan(data: Dataset, functionals: dict[str, np.ndarray] | None = None, num_splits: int = 1000,
         K: int = 4, forest_params: ForestParams = ForestParams(num_trees=2000, bag_size=1),
         seed: int = 0, workers: int = 1, runs: list[SplitRun] | None = None) -> InferenceResult:
    """Mean of each functional in the lowest-score and highest-score groups.

    Terms are ``<name>|G1``, ``<name>|G<K>`` and ``<name>|G1-G<K>``.  A
    functional constant within the groups gives a zero-width interval; a
    group with fewer than two rows gives no bounds.
    """
    runs = _ensure_runs(data, runs, num_splits, forest_params, seed, workers)
    functionals = clan_columns(data) if functionals is None else functionals
    for name, v in functionals.items():
        if np.shape(v) != (data.n,):
            raise DataError(f"functional {name!r} must have one value per row")
    z = _z()
    names = []
    for name in functionals:
        names += [f"{name}|G1", f"{name}|G{K}", f"{name}|G1-G{K}"]
    per = []
    for r in runs:
        groups = group_labels(r.S, K)
        lo, hi = r.main[groups == 1], r.main[groups == K]
        out = {}
        for name, v in functionals.items():
            v = np.asarray(v, dtype=float)
            a, b = v[lo], v[hi]
            out[f"{name}|G1"] = _mean_ci(a, z)
            out[f"{name}|G{K}"] = _mean_ci(b, z)
            out[f"{name}|G1-G{K}"] = _diff_ci(a, b, z)
        per.append(out)
    return _collect(per, names)
