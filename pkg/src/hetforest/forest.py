"""Subsampled ensembles of honest causal trees and regression trees."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import _kernels as K
from . import __version__
from ._io import load_archive, save_archive
from .data import CovariateSchema, Dataset, DataError, SchemaMismatchError, SeededSampler
from .trees import (CAUSAL, EFFECT, OUTCOME, REGRESSION, Tree, TreeParams, _capacity,
                    _NODE_FIELDS, column_layout, kernel_errstate)

FORMAT_VERSION = 1
VARIANCE_FLOOR = 1e-12
TREES_PER_CHUNK = 128

# stream ids under the forest seed
_TREE_STREAM = 101
_BAG_STREAM = 102


@dataclass(frozen=True)
class ForestParams:
    """Ensemble settings.

    Each tree sees ``floor(sample_fraction * n)`` rows drawn without
    replacement.  With ``bag_size >= 2`` trees come in groups that share a
    random half-sample (their subsamples are drawn from it), which is what
    the variance estimate needs; ``bag_size=1`` draws every subsample from
    the full data and reports only the variance floor.
    """

    num_trees: int = 15000
    sample_fraction: float = 0.5
    mtry_fraction: float = 1.0 / 3.0
    tree_params: TreeParams = field(default_factory=TreeParams)
    bag_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0.0 < self.mtry_fraction <= 1.0:
            raise ValueError("mtry_fraction must lie in (0, 1]")
        if self.bag_size < 1 or self.num_trees % self.bag_size:
            raise ValueError(f"bag_size {self.bag_size} must divide num_trees {self.num_trees}")
        if self.bag_size >= 2 and self.sample_fraction > 0.5:
            raise ValueError("grouped trees draw from half-samples; sample_fraction must be <= 0.5")

    def mtry(self, p: int) -> int:
        return max(1, int(math.floor(p * self.mtry_fraction)))

    def with_(self, **changes) -> "ForestParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ForestParams":
        doc = dict(doc)
        doc["tree_params"] = TreeParams(**doc.get("tree_params", {}))
        return cls(**doc)


@dataclass(frozen=True)
class ItePrediction:
    tau_hat: float
    variance: float
    ci_low: float
    ci_high: float
    level: float


@dataclass(frozen=True)
class AteEstimate:
    ate: float
    se: float


class CausalForest:
    """Fitted ensemble.  Node arrays of all trees are concatenated; tree
    ``t`` occupies ``offsets[t]:offsets[t+1]`` with tree-local child ids."""

    def __init__(self, mode, params, schema, width, n_train, nodes, offsets, subsamples,
                 bags, estimated=True):
        self.mode = mode
        self.params = params
        self.schema = schema
        self.width = width
        self.n_train = n_train
        self.nodes = nodes
        self.offsets = offsets
        self.subsamples = subsamples
        self.bags = bags
        self.estimated = estimated

    @classmethod
    def from_trees(cls, trees: list[Tree], schema: CovariateSchema,
                   params: ForestParams | None = None) -> "CausalForest":
        """Assemble a forest from individually built trees (one bag per tree)."""
        if not trees:
            raise ValueError("at least one tree is required")
        width = trees[0].width
        if width != schema.width or any(t.width != width for t in trees):
            raise SchemaMismatchError("trees and schema disagree on the column count")
        params = params or ForestParams(num_trees=len(trees), bag_size=1)
        nodes = {name: np.concatenate([getattr(t, name) for t in trees]) for name in _NODE_FIELDS}
        offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        np.cumsum([t.n_nodes for t in trees], out=offsets[1:])
        return cls(trees[0].mode, params, schema, width, 0, nodes, offsets,
                   np.empty((len(trees), 0), dtype=np.int64), np.arange(len(trees), dtype=np.int64))

    @property
    def num_trees(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_bags(self) -> int:
        return int(self.bags.max()) + 1 if self.bags.size else 0

    def tree(self, t: int) -> Tree:
        a, b = self.offsets[t], self.offsets[t + 1]
        return Tree(self.mode, self.width, {k: v[a:b] for k, v in self.nodes.items()})

    def subsample(self, t: int) -> np.ndarray:
        return np.sort(self.subsamples[t])

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        if X.shape[1] != self.width:
            raise SchemaMismatchError(f"rows have {X.shape[1]} columns, forest expects {self.width}")
        if not self.estimated:
            raise ValueError("forest was fitted for split statistics only and cannot predict")
        return X

    def _values(self, target: str) -> np.ndarray:
        if target == EFFECT:
            if self.mode != CAUSAL:
                raise ValueError("regression forests predict outcomes, not effects")
            return self.nodes["tau"]
        return self.nodes["mean_y"]

    def _run(self, X, target, want_var):
        X = self._check(X)
        n = self.nodes
        with kernel_errstate():
            return K.predict(X, n["feat"], n["thr"], n["left"], n["right"], self._values(target),
                             self.offsets, self.bags, max(self.n_bags, 1), self.params.bag_size,
                             want_var, VARIANCE_FLOOR)

    def predict(self, X, target: str | None = None) -> np.ndarray:
        """Average of per-tree leaf values (effects for causal forests)."""
        target = target or (EFFECT if self.mode == CAUSAL else OUTCOME)
        return self._run(X, target, False)[0]

    def tree_predictions(self, X, target: str | None = None) -> np.ndarray:
        target = target or (EFFECT if self.mode == CAUSAL else OUTCOME)
        X = self._check(X)
        n = self.nodes
        return K.tree_matrix(X, n["feat"], n["thr"], n["left"], n["right"], self._values(target),
                             self.offsets)

    def predict_interval(self, X, level: float = 0.90, target: str | None = None) -> pd.DataFrame:
        """Point predictions, little-bags variances and normal intervals."""
        if not 0.0 < level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        target = target or (EFFECT if self.mode == CAUSAL else OUTCOME)
        est, var = self._run(X, target, True)
        if self.params.bag_size < 2:
            var = np.full_like(est, VARIANCE_FLOOR)
        z = norm.ppf(0.5 + level / 2.0)
        half = z * np.sqrt(var)
        return pd.DataFrame({"tau_hat": est, "variance": var,
                             "ci_low": est - half, "ci_high": est + half})

    def split_counts(self, max_depth: int = 4) -> np.ndarray:
        """(max_depth, width) counts of splits per depth and column, all trees."""
        feat, depth = self.nodes["feat"], self.nodes["depth"]
        keep = (feat >= 0) & (depth <= max_depth)
        counts = np.zeros((max_depth, self.width), dtype=np.int64)
        np.add.at(counts, (depth[keep] - 1, feat[keep]), 1)
        return counts

    # ---- persistence
    def save(self, path: str | Path) -> None:
        meta = {
            "format": FORMAT_VERSION,
            "package_version": __version__,
            "mode": self.mode,
            "params": self.params.to_dict(),
            "schema": self.schema.to_json(),
            "width": self.width,
            "n_train": self.n_train,
            "estimated": self.estimated,
        }
        arrays = {f"node_{k}": v for k, v in self.nodes.items()}
        arrays.update(offsets=self.offsets, subsamples=self.subsamples, bags=self.bags)
        save_archive(path, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "CausalForest":
        meta, arrays = load_archive(path)
        if meta.get("format") != FORMAT_VERSION:
            raise DataError(f"unsupported forest format {meta.get('format')!r}")
        nodes = {k[5:]: v for k, v in arrays.items() if k.startswith("node_")}
        return cls(meta["mode"], ForestParams.from_dict(meta["params"]),
                   CovariateSchema.from_json(meta["schema"]), meta["width"], meta["n_train"],
                   nodes, arrays["offsets"], arrays["subsamples"], arrays["bags"],
                   meta["estimated"])


def _fit(data: Dataset, params: ForestParams, causal: bool, workers: int = 1,
         depth_cap: int | None = None, estimate: bool = True) -> CausalForest:
    n, p = data.n, data.p
    tp = params.tree_params
    sub_size = int(math.floor(params.sample_fraction * n))
    if sub_size < 2:
        raise DataError(f"sample_fraction {params.sample_fraction} of {n} rows is too small")
    if causal:
        m = tp.min_treat_control_per_leaf
        if data.n_treated < m or data.n_control < m:
            raise DataError(f"need at least {m} treated and {m} control rows")
    elif n < 2 * tp.min_leaf:
        raise DataError(f"need at least {2 * tp.min_leaf} rows")
    T = params.num_trees
    if params.bag_size >= 2:
        n_bags = T // params.bag_size
        bag_rng = SeededSampler(params.seed, _BAG_STREAM).rng
        half = n // 2
        if sub_size > half:
            raise DataError("subsample does not fit in a half-sample")
        bag_rows = np.empty((n_bags, half), dtype=np.int64)
        for g in range(n_bags):
            bag_rows[g] = bag_rng.permutation(n)[:half]
        bags = np.repeat(np.arange(n_bags, dtype=np.int64), params.bag_size)
    else:
        bag_rows = np.empty((0, 0), dtype=np.int64)
        bags = np.arange(T, dtype=np.int64)
    seeds = SeededSampler(params.seed, _TREE_STREAM).uint64(T)

    s_size = (sub_size + 1) // 2 if tp.honest else sub_size
    cap = _capacity(s_size, causal, tp)
    max_depth = tp.depth_limit if depth_cap is None else min(tp.depth_limit, depth_cap)
    layout = column_layout(data.x)
    XT, is_binary, slot, ranks = layout
    features = np.arange(p, dtype=np.int64)
    mtry = params.mtry(p)
    y = np.ascontiguousarray(data.y)
    d = np.ascontiguousarray(data.d)

    def job(lo):
        hi = min(lo + TREES_PER_CHUNK, T)
        with kernel_errstate():
            out = K.fit_tree_chunk(XT, ranks, y, d, features, mtry, is_binary, slot, causal,
                                   tp.min_leaf, tp.min_treat_control_per_leaf, max_depth,
                                   tp.honest, estimate, seeds[lo:hi], bags[lo:hi], bag_rows,
                                   sub_size, cap)
        *cols, counts, subs = out
        keep = (np.arange(cap)[None, :] < counts[:, None]).ravel()
        return {name: c[keep] for name, c in zip(_NODE_FIELDS, cols)}, counts, subs

    starts = range(0, T, TREES_PER_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(lo) for lo in starts]
    nodes = {name: np.concatenate([pt[0][name] for pt in parts]) for name in _NODE_FIELDS}
    counts = np.concatenate([pt[1] for pt in parts])
    offsets = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    subs = np.concatenate([pt[2] for pt in parts])
    return CausalForest(CAUSAL if causal else REGRESSION, params, data.schema, p, n, nodes,
                        offsets, subs, bags, estimated=estimate)


def fit_causal_forest(data: Dataset, params: ForestParams = ForestParams(), workers: int = 1) -> CausalForest:
    """Average of honest causal trees, each on its own subsample.

    A fresh subset of ``max(1, floor(p * mtry_fraction))`` columns is drawn
    at every split.  The result depends only on (data, params); ``workers``
    changes wall time, never the fitted trees.
    """
    return _fit(data, params, True, workers)


def fit_regression_forest(data: Dataset, params: ForestParams = ForestParams(), workers: int = 1) -> CausalForest:
    """Random forest on the outcome with squared-error splits."""
    return _fit(data, params, False, workers)


def predict_ite(forest: CausalForest, row, level: float = 0.90) -> ItePrediction:
    """Effect estimate for one covariate row with a normal confidence interval."""
    row = np.asarray(row, dtype=float).reshape(1, -1)
    r = forest.predict_interval(row, level).iloc[0]
    return ItePrediction(float(r.tau_hat), float(r.variance), float(r.ci_low), float(r.ci_high), level)


def ate_difference_in_means(data: Dataset) -> AteEstimate:
    """Treated minus control mean with the unpooled two-sample standard error."""
    yt = data.y[data.d == 1]
    yc = data.y[data.d == 0]
    if yt.size == 0 or yc.size == 0:
        raise DataError("both treatment arms must be non-empty")
    ate = float(yt.mean() - yc.mean())
    if yt.size < 2 or yc.size < 2:
        return AteEstimate(ate, math.nan)
    se = math.sqrt(yt.var(ddof=1) / yt.size + yc.var(ddof=1) / yc.size)
    return AteEstimate(ate, se)
