"""Compare the numba kernels with the pure-numpy fallback.

Each path runs in its own interpreter because the switch is read at
import time.  Usage::

    python benchmarks/bench_kernels.py [--n 2000] [--trees 200] [--repeat 3]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import hashlib, json, sys, time
import numpy as np
from hetforest._accel import USE_NUMBA
from hetforest.forest import ForestParams, fit_causal_forest
from hetforest.simulation import SimDesign, simulate

n, trees, repeat = (int(v) for v in sys.argv[1:4])
data, _ = simulate(SimDesign(3, n, seed=1))
params = ForestParams(num_trees=trees, bag_size=1, seed=2)
fit_causal_forest(data, params.with_(num_trees=1))  # compile / warm caches
times = []
for _ in range(repeat):
    t = time.perf_counter()
    forest = fit_causal_forest(data, params)
    times.append(time.perf_counter() - t)
digest = hashlib.sha256(forest.predict(data.x).tobytes()).hexdigest()
print(json.dumps({"numba": USE_NUMBA, "best_seconds": min(times), "digest": digest}))
"""


def run(disable: bool, n: int, trees: int, repeat: int) -> dict:
    env = dict(os.environ)
    if disable:
        env["HETFOREST_DISABLE_NUMBA"] = "1"
    else:
        env.pop("HETFOREST_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", CHILD, str(n), str(trees), str(repeat)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--trees", type=int, default=200)
    ap.add_argument("--fallback-trees", type=int, default=None,
                    help="trees for the fallback run (default: same as --trees)")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run(False, args.n, args.trees, args.repeat)
    slow_trees = args.fallback_trees or args.trees
    slow = run(True, args.n, slow_trees, args.repeat)
    per_fast = fast["best_seconds"] / args.trees
    per_slow = slow["best_seconds"] / slow_trees
    print(f"n={args.n}")
    print(f"numba:    {fast['best_seconds']:.3f} s for {args.trees} trees ({1e3 * per_fast:.2f} ms/tree)")
    print(f"fallback: {slow['best_seconds']:.3f} s for {slow_trees} trees ({1e3 * per_slow:.2f} ms/tree)")
    print(f"speedup per tree: {per_slow / per_fast:.1f}x")
    if slow_trees == args.trees:
        print(f"identical predictions: {fast['digest'] == slow['digest']}")


if __name__ == "__main__":
    main()
