"""Regression trees and honest causal trees."""
from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import _kernels as K
from ._accel import USE_NUMBA
from .data import Dataset, SchemaMismatchError, SeededSampler, split_half_indices

EFFECT = "effect"
OUTCOME = "outcome"
CAUSAL = "causal"
REGRESSION = "regression"


@dataclass(frozen=True)
class TreeParams:
    """Growth limits shared by regression and causal trees.

    ``max_depth`` counts split levels (``0`` = a single leaf, ``None`` =
    grow until the size limits bind).  ``min_treat_control_per_leaf`` only
    applies to causal trees.
    """

    min_leaf: int = 5
    min_treat_control_per_leaf: int = 5
    honest: bool = True
    max_depth: int | None = None

    def __post_init__(self):
        if self.min_leaf < 1 or self.min_treat_control_per_leaf < 1:
            raise ValueError("leaf size bounds must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")

    @property
    def depth_limit(self) -> int:
        return K.NO_LIMIT if self.max_depth is None else int(self.max_depth)


@dataclass(frozen=True)
class SplitRule:
    feature: int
    threshold: float

    def goes_left(self, row) -> bool:
        return row[self.feature] <= self.threshold


@dataclass(frozen=True)
class LeafStats:
    n_total: int
    n_treated: int
    n_control: int
    mean_treated: float
    mean_control: float
    tau_hat: float
    mean_y: float


@dataclass(frozen=True)
class TreeNode:
    depth: int
    split: SplitRule | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf: LeafStats | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@contextmanager
def kernel_errstate():
    # the interpreted RNG relies on uint64 wraparound
    if USE_NUMBA:
        yield
    else:
        with np.errstate(over="ignore"):
            yield


def column_layout(x: np.ndarray):
    """Feature-major copy of ``x`` plus the split-search lookup tables."""
    XT = np.ascontiguousarray(np.asarray(x, dtype=float).T)
    is_binary = np.all((XT == 0.0) | (XT == 1.0), axis=1)
    slot = K.continuous_slots(is_binary)
    ranks = K.dense_ranks(XT, slot)
    return XT, is_binary, slot, ranks


_NODE_FIELDS = ("feat", "thr", "left", "right", "parent", "depth", "n_tot", "n_t", "n_c",
                "mean_t", "mean_c", "tau", "mean_y")


class Tree:
    """A fitted tree held as flat node arrays (``feat < 0`` marks leaves)."""

    def __init__(self, mode: str, width: int, arrays: dict, candidates: np.ndarray | None = None):
        self.mode = mode
        self.width = width
        for name in _NODE_FIELDS:
            setattr(self, name, np.asarray(arrays[name]))
        self.candidates = candidates

    @property
    def n_nodes(self) -> int:
        return self.feat.shape[0]

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feat < 0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.width:
            raise SchemaMismatchError(f"rows have {X.shape[1]} columns, tree expects {self.width}")
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feat[node] >= 0
        while active.any():
            nd = node[active]
            go_left = X[active, self.feat[nd]] <= self.thr[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feat[node] >= 0
        return node

    def predict(self, X, target: str = EFFECT) -> np.ndarray:
        values = self.tau if target == EFFECT else self.mean_y
        return values[self.apply(X)]

    def leaf_stats(self, node: int) -> LeafStats:
        return LeafStats(int(self.n_tot[node]), int(self.n_t[node]), int(self.n_c[node]),
                         float(self.mean_t[node]), float(self.mean_c[node]),
                         float(self.tau[node]), float(self.mean_y[node]))

    def node(self, i: int = 0) -> TreeNode:
        """Nested :class:`TreeNode` view rooted at node ``i``."""
        if self.feat[i] < 0:
            return TreeNode(int(self.depth[i]), leaf=self.leaf_stats(i))
        return TreeNode(
            int(self.depth[i]),
            split=SplitRule(int(self.feat[i]), float(self.thr[i])),
            left=self.node(int(self.left[i])),
            right=self.node(int(self.right[i])),
        )

    @property
    def root(self) -> TreeNode:
        return self.node(0)

    def splits(self) -> Iterator[tuple[int, int, float]]:
        """(depth, feature, threshold) of every internal node, breadth-first."""
        for i in np.flatnonzero(self.feat >= 0):
            yield int(self.depth[i]), int(self.feat[i]), float(self.thr[i])

    def structure_hash(self) -> str:
        """Digest of the split rules in preorder (leaf estimates and node numbering excluded)."""
        h = hashlib.sha256()
        stack = [0]
        while stack:
            i = stack.pop()
            if self.feat[i] < 0:
                h.update(b"L")
                continue
            h.update(b"S" + np.int64(self.feat[i]).tobytes() + np.float64(self.thr[i]).tobytes())
            stack += [int(self.right[i]), int(self.left[i])]
        return h.hexdigest()

    def to_dict(self) -> dict:
        def enc(i):
            out = {"depth": int(self.depth[i])}
            if self.feat[i] >= 0:
                out["split"] = {"feature": int(self.feat[i]), "threshold": float(self.thr[i])}
                out["left"] = enc(int(self.left[i]))
                out["right"] = enc(int(self.right[i]))
            else:
                s = self.leaf_stats(i)
                out["leaf"] = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                               for k, v in s.__dict__.items()}
            return out

        return {"mode": self.mode, "width": self.width, "root": enc(0)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        cols = {name: [] for name in _NODE_FIELDS}

        def visit(node, parent):
            i = len(cols["feat"])
            for name in _NODE_FIELDS:
                cols[name].append(None)
            cols["parent"][i] = parent
            cols["depth"][i] = node["depth"]
            if "split" in node:
                cols["feat"][i] = node["split"]["feature"]
                cols["thr"][i] = node["split"]["threshold"]
                for name in ("n_tot", "n_t", "n_c"):
                    cols[name][i] = 0
                for name in ("mean_t", "mean_c", "tau", "mean_y"):
                    cols[name][i] = math.nan
                cols["left"][i] = visit(node["left"], i)
                cols["right"][i] = visit(node["right"], i)
            else:
                leaf = {k: (math.nan if v is None else v) for k, v in node["leaf"].items()}
                cols["feat"][i], cols["thr"][i] = -1, math.nan
                cols["left"][i] = cols["right"][i] = -1
                cols["n_tot"][i], cols["n_t"][i], cols["n_c"][i] = (
                    leaf["n_total"], leaf["n_treated"], leaf["n_control"])
                cols["mean_t"][i], cols["mean_c"][i] = leaf["mean_treated"], leaf["mean_control"]
                cols["tau"][i], cols["mean_y"][i] = leaf["tau_hat"], leaf["mean_y"]
            return i

        visit(doc["root"], -1)
        arrays = {k: np.asarray(v, dtype=float if k in ("thr", "mean_t", "mean_c", "tau", "mean_y")
                                else np.int64) for k, v in cols.items()}
        return cls(doc["mode"], int(doc["width"]), arrays)

    @classmethod
    def loads(cls, text: str) -> "Tree":
        return cls.from_dict(json.loads(text))


def _capacity(s_size: int, causal: bool, params: TreeParams) -> int:
    min_size = max(params.min_leaf, 2 * params.min_treat_control_per_leaf) if causal else params.min_leaf
    return 2 * max(1, s_size // min_size) + 1


def grow(
    x: np.ndarray,
    y: np.ndarray,
    d: np.ndarray,
    s_rows: np.ndarray,
    e_rows: np.ndarray,
    causal: bool,
    params: TreeParams,
    features: np.ndarray,
    mtry: int,
    seed: int,
    record_candidates: bool = False,
    layout=None,
) -> Tree:
    """Low-level single-tree fit on explicit structure/estimation rows."""
    XT, is_binary, slot, ranks = layout if layout is not None else column_layout(x)
    features = np.asarray(features, dtype=np.int64)
    if not 1 <= mtry <= features.shape[0]:
        raise ValueError("mtry must lie between 1 and the number of candidate features")
    s_rows = np.asarray(s_rows, dtype=np.int64)
    cap = _capacity(s_rows.shape[0], causal, params)
    n = XT.shape[1]
    arrays = {
        name: np.empty(cap, dtype=float if name in ("thr", "mean_t", "mean_c", "tau", "mean_y") else np.int64)
        for name in _NODE_FIELDS
    }
    cand = np.full((cap, mtry), -1, np.int64) if record_candidates else np.empty((0, 0), np.int64)
    state = np.array([seed], dtype=np.uint64)
    with kernel_errstate():
        iw, fw, presorted = K.new_workspace(n, cap, features.shape[0], mtry, ranks.shape[0])
        n_nodes = K.grow_tree(
            XT, ranks, np.ascontiguousarray(y, dtype=float), np.ascontiguousarray(d, dtype=np.int64),
            s_rows, np.asarray(e_rows, dtype=np.int64), features, mtry, is_binary, slot, causal,
            params.min_leaf, params.min_treat_control_per_leaf, params.depth_limit, True, state,
            iw, fw, presorted, *(arrays[name] for name in _NODE_FIELDS), cand,
        )
    arrays = {k: v[:n_nodes].copy() for k, v in arrays.items()}
    return Tree(CAUSAL if causal else REGRESSION, XT.shape[0], arrays,
                cand[:n_nodes].copy() if record_candidates else None)


def _rows_for(data: Dataset, params: TreeParams, sampler: SeededSampler | None):
    if params.honest:
        if sampler is None:
            raise ValueError("honest trees need a sampler for the structure/estimation split")
        s_rows, e_rows = split_half_indices(data.n, sampler)
    else:
        s_rows = e_rows = np.arange(data.n)
    return s_rows, e_rows


def _features(data: Dataset, candidate_features) -> np.ndarray:
    if candidate_features is None:
        return np.arange(data.p, dtype=np.int64)
    feats = np.unique(np.asarray(candidate_features, dtype=np.int64))
    if feats.size == 0 or feats.min() < 0 or feats.max() >= data.p:
        raise ValueError("candidate features must be valid column indices")
    return feats


def _tree_seed(sampler: SeededSampler | None) -> int:
    return int(sampler.child(1).uint64()) if sampler is not None else 0


def fit_regression_tree(
    data: Dataset,
    params: TreeParams = TreeParams(),
    candidate_features=None,
    sampler: SeededSampler | None = None,
) -> Tree:
    """CART regression tree on the outcome (squared-error splits).

    With ``params.honest`` the structure is grown on one random half and the
    leaf means are computed on the other.
    """
    if data.n < 2 * params.min_leaf:
        raise ValueError(f"need at least {2 * params.min_leaf} rows, got {data.n}")
    feats = _features(data, candidate_features)
    s_rows, e_rows = _rows_for(data, params, sampler)
    return grow(data.x, data.y, data.d, s_rows, e_rows, False, params, feats, feats.size,
                _tree_seed(sampler))


def fit_causal_tree(
    data: Dataset,
    params: TreeParams = TreeParams(),
    candidate_features=None,
    sampler: SeededSampler | None = None,
    record_candidates: bool = False,
) -> Tree:
    """Causal tree with difference-in-means leaves.

    Splits maximise ``n_L*tau_L**2 + n_R*tau_R**2`` subject to every child
    holding at least ``min_treat_control_per_leaf`` treated and control
    rows.  A leaf whose estimation rows lack one arm borrows the estimate of
    its nearest ancestor that has both.
    """
    m = params.min_treat_control_per_leaf
    if data.n_treated < m or data.n_control < m:
        raise ValueError(f"need at least {m} treated and {m} control rows")
    feats = _features(data, candidate_features)
    s_rows, e_rows = _rows_for(data, params, sampler)
    return grow(data.x, data.y, data.d, s_rows, e_rows, True, params, feats, feats.size,
                _tree_seed(sampler), record_candidates=record_candidates)


def predict_tree(tree: Tree, row, target: str = EFFECT) -> float:
    """Statistic of the leaf that ``row`` falls into (``<=`` goes left)."""
    row = np.asarray(row, dtype=float).reshape(-1)
    if row.shape[0] != tree.width:
        raise SchemaMismatchError(f"row has {row.shape[0]} entries, tree expects {tree.width}")
    if target not in (EFFECT, OUTCOME):
        raise ValueError(f"target must be {EFFECT!r} or {OUTCOME!r}")
    return float(tree.predict(row[None, :], target)[0])
