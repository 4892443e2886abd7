"""The numba kernels and their pure-numpy twins must agree bit for bit."""
import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from hetforest import _kernels as K
from hetforest._accel import USE_NUMBA

needs_numba = pytest.mark.skipif(not USE_NUMBA, reason="numba path disabled")


def _py(fn):
    return getattr(fn, "py_func", fn)


def _sorted_case(rng, n, binary=False):
    x = rng.integers(0, 2, n).astype(float) if binary else np.sort(np.round(rng.normal(size=n), 1))
    y = rng.normal(size=n)
    d = rng.integers(0, 2, n)
    return x, y, d


@pytest.mark.parametrize("seed", range(30))
def test_causal_split_twins(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    for binary in (False, True):
        x, y, d = _sorted_case(rng, n, binary)
        nt = int(d.sum())
        st, sc = float((d * y).sum()), float(((1 - d) * y).sum())
        fn = K.causal_split_binary_loop if binary else K.causal_split_sorted_loop
        np_fn = K.causal_split_binary_np if binary else K.causal_split_sorted_np
        args = (x, y, d, nt, n - nt, st, sc, 2, 1)
        a, b, c = fn(*args), np_fn(*args), _py(fn)(*args)
        assert a[0] == b[0] == c[0] or (np.isinf(a[0]) and np.isinf(b[0]))
        assert a[1] == b[1] or (np.isnan(a[1]) and np.isnan(b[1]))


@pytest.mark.parametrize("seed", range(30))
def test_regression_split_twins(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(4, 60))
    for binary in (False, True):
        x, y, _ = _sorted_case(rng, n, binary)
        fn = K.regression_split_binary_loop if binary else K.regression_split_sorted_loop
        np_fn = K.regression_split_binary_np if binary else K.regression_split_sorted_np
        a, b = fn(x, y, float(y.sum()), 2), np_fn(x, y, float(y.sum()), 2)
        assert a[0] == b[0] or (np.isinf(a[0]) and np.isinf(b[0]))
        assert a[1] == b[1] or (np.isnan(a[1]) and np.isnan(b[1]))


def test_rng_matches_reference_splitmix():
    state = np.array([12345], dtype=np.uint64)
    mask = (1 << 64) - 1
    s = 12345
    with np.errstate(over="ignore"):
        for _ in range(5):
            s = (s + 0x9E3779B97F4A7C15) & mask
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
            z ^= z >> 31
            assert int(_py(K.rng_next)(state)) == z


SCRIPT = textwrap.dedent("""
    import json, sys
    import numpy as np
    from hetforest.simulation import simulate, SimDesign
    from hetforest.forest import ForestParams, fit_causal_forest, fit_regression_forest
    data, _ = simulate(SimDesign(3, 240, 1))
    f = fit_causal_forest(data, ForestParams(num_trees=16, bag_size=4, seed=2))
    r = fit_regression_forest(data, ForestParams(num_trees=8, bag_size=1, seed=2))
    t = f.predict_interval(data.x)
    out = {"tau": t.tau_hat.tolist(), "var": t.variance.tolist(), "reg": r.predict(data.x).tolist(),
           "thr": [v if v == v else None for v in f.nodes["thr"].tolist()]}
    json.dump(out, sys.stdout)
""")


def _run(disable):
    env = dict(os.environ)
    env.pop("HETFOREST_DISABLE_NUMBA", None)
    if disable:
        env["HETFOREST_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def test_forest_identical_across_paths():
    assert _run(False) == _run(True)
