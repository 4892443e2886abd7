"""Synthetic benchmark designs with known effects.

All designs share the covariates

    X1 ~ N(0, 1),  X2 ~ Cat(2),  X3 ~ Cat(4),  X4 ~ Cat(10),  X5 ~ Cat(20)

with equiprobable levels coded ``0..k-1`` and a fair coin for treatment.
Outcomes follow ``Y = eta(X) + 0.5 * (2D - 1) * kappa(X) + eps`` with
``eps ~ N(0, 1)``, so the unit-level effect is ``kappa(X)``:

* design 1: ``Y ~ N(0, 1)`` (no signal at all);
* design 2: ``eta = 0``, ``kappa = X2``;
* design 3: ``eta = 0.5 X1 + X2``, ``kappa = X2``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .data import CATEGORICAL, Covariate, CovariateSchema, Dataset, SeededSampler
from .forest import ForestParams
from .importance import PermutationTestConfig, permutation_pvalues
from .trees import TreeParams

LEVELS = {"X2": 2, "X3": 4, "X4": 10, "X5": 20}
SCHEMA = CovariateSchema(
    (Covariate("X1"),)
    + tuple(Covariate(name, CATEGORICAL, tuple(str(v) for v in range(k))) for name, k in LEVELS.items())
)

_SIM_STREAM = 301
_BENCH_STREAM = 302

# desk-scale benchmark forest: min node 5, floor(p/3) candidates per split
BENCHMARK_FOREST = ForestParams(num_trees=500, sample_fraction=0.5, mtry_fraction=1.0 / 3.0,
                                tree_params=TreeParams(min_leaf=5, min_treat_control_per_leaf=5),
                                bag_size=1)


@dataclass(frozen=True)
class SimDesign:
    design: int
    n: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.design not in (1, 2, 3):
            raise ValueError(f"design must be 1, 2 or 3, got {self.design}")
        if self.n < 10:
            raise ValueError("n must be >= 10")


@dataclass(frozen=True)
class SimTruth:
    tau: np.ndarray
    ate: float


def draw_covariates(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Raw covariate columns: X1 numeric, the rest integer codes."""
    cols = {"X1": rng.standard_normal(n)}
    for name, k in LEVELS.items():
        cols[name] = rng.integers(0, k, size=n)
    return cols


def _assemble(cols, d, y, schema=SCHEMA) -> Dataset:
    x = schema.expand({k: (v if k == "X1" else v.astype(str)) for k, v in cols.items()})
    return Dataset(schema, x, y, d, propensity=0.5)


def simulate_template(n: int, seed: int,
                      eta: Callable[[dict], np.ndarray],
                      kappa: Callable[[dict], np.ndarray],
                      noise_sd: float = 1.0) -> tuple[Dataset, SimTruth]:
    """Shared covariates with user-supplied baseline ``eta`` and effect ``kappa``.

    Both callables receive the raw covariate columns (X2..X5 as integer codes).
    The reported ATE is the sample mean of ``kappa``.
    """
    rng = SeededSampler(seed, _SIM_STREAM).rng
    cols = draw_covariates(n, rng)
    d = rng.integers(0, 2, size=n)
    eps = rng.standard_normal(n) * noise_sd
    k = np.broadcast_to(np.asarray(kappa(cols), dtype=float), (n,)).copy()
    e = np.broadcast_to(np.asarray(eta(cols), dtype=float), (n,))
    y = e + 0.5 * (2 * d - 1) * k + eps
    return _assemble(cols, d, y), SimTruth(k, float(k.mean()))


def simulate(design: SimDesign) -> tuple[Dataset, SimTruth]:
    """Draw one dataset of the given design; ``SimTruth.ate`` is the population ATE."""
    n = design.n
    if design.design == 1:
        rng = SeededSampler(design.seed, _SIM_STREAM).rng
        cols = draw_covariates(n, rng)
        d = rng.integers(0, 2, size=n)
        y = rng.standard_normal(n)
        return _assemble(cols, d, y), SimTruth(np.zeros(n), 0.0)
    if design.design == 2:
        eta = lambda c: 0.0  # noqa: E731
    else:
        eta = lambda c: 0.5 * c["X1"] + c["X2"]  # noqa: E731
    data, truth = simulate_template(n, design.seed, eta, lambda c: c["X2"].astype(float))
    return data, SimTruth(truth.tau, 0.5)


def run_appendix_benchmark(designs=(1, 2, 3), iterations: int = 20, permutations: int = 100,
                           forest_params: ForestParams = BENCHMARK_FOREST, n: int = 500,
                           seed: int = 0, workers: int = 1) -> pd.DataFrame:
    """Importances and permutation p-values over repeated draws of each design.

    Returns one row per (design, iteration, variable) with columns
    ``design, iteration, variable, raw_importance, scaled_importance, p_value``.
    Iteration ``i`` of design ``g`` uses data seed and forest seed drawn from
    a stream keyed by ``(seed, g, i)``, so rows do not depend on ``workers``.
    """
    jobs = [(g, i) for g in designs for i in range(1, iterations + 1)]

    def one(job):
        g, i = job
        seeds = SeededSampler(seed, (_BENCH_STREAM, g, i)).uint64(3)
        data, _ = simulate(SimDesign(g, n, int(seeds[0] >> np.uint64(1))))
        cfg = PermutationTestConfig(permutations,
                                    forest_params.with_(seed=int(seeds[1] >> np.uint64(1))),
                                    int(seeds[2] >> np.uint64(1)))
        rep = permutation_pvalues(data, cfg).to_frame()
        rep.insert(0, "iteration", i)
        rep.insert(0, "design", g)
        return rep

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    return pd.concat(parts, ignore_index=True)
