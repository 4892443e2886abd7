import numpy as np
import pytest
from scipy.stats import kstest

import hetforest.importance as imp
from hetforest.data import CATEGORICAL, Covariate, CovariateSchema
from hetforest.forest import CausalForest, ForestParams, fit_causal_forest
from hetforest.importance import (WEIGHT_TOTAL, ImportanceReport, PermutationTestConfig,
                                  column_importance, permutation_pvalues, split_frequency_importance)
from hetforest.trees import Tree, TreeParams

from conftest import make_dataset
from oracles import importance_by_hand

LEAF = {"n_total": 2, "n_treated": 1, "n_control": 1, "mean_treated": 1.0, "mean_control": 0.0,
        "tau_hat": 1.0, "mean_y": 0.5}


def node(depth, layout):
    """layout is None for a leaf or (feature, left_layout, right_layout)."""
    if layout is None:
        return {"depth": depth, "leaf": LEAF}
    f, l, r = layout
    return {"depth": depth, "split": {"feature": f, "threshold": 0.5},
            "left": node(depth + 1, l), "right": node(depth + 1, r)}


def forest_of(layouts, schema):
    trees = [Tree.from_dict({"mode": "causal", "width": schema.width, "root": node(1, s)}) for s in layouts]
    return CausalForest.from_trees(trees, schema)


# three hand-built trees over columns 0, 1, 2
TREE_A = (0, (1, None, None), (0, (2, None, None), None))
TREE_B = (1, (1, None, None), None)
TREE_C = (0, None, None)


def test_three_tree_fixture_by_pencil():
    schema = CovariateSchema.continuous(["a", "b", "c"])
    rep = split_frequency_importance(forest_of([TREE_A, TREE_B, TREE_C], schema))
    # depth 1: a 2/3, b 1/3; depth 2: a 1/3, b 2/3; depth 3: c 1; weight total 205/144
    expected = np.array([108, 72, 16]) / 205
    assert np.abs(rep.raw - expected).max() <= 1e-12
    records = [(1, 0), (2, 1), (2, 0), (3, 2), (1, 1), (2, 1), (1, 0)]
    assert np.abs(rep.raw - importance_by_hand(records, 3)).max() <= 1e-12


def test_stump_forest():
    schema = CovariateSchema.continuous(["a", "b"])
    rep = split_frequency_importance(forest_of([(1, None, None)] * 5, schema))
    assert rep.raw[1] == pytest.approx(1 / WEIGHT_TOTAL, abs=1e-12)
    assert rep.raw[1] == pytest.approx(0.70244, abs=1e-5)
    assert rep.raw[0] == 0.0
    np.testing.assert_array_equal(rep.scaled, [0.0, 100.0])


def test_no_splits_gives_zero():
    schema = CovariateSchema.continuous(["a", "b"])
    rep = split_frequency_importance(forest_of([None, None], schema))
    np.testing.assert_array_equal(rep.raw, [0.0, 0.0])
    np.testing.assert_array_equal(rep.scaled, [0.0, 0.0])


def test_symmetric_usage_gives_equal_importance():
    schema = CovariateSchema.continuous(["a", "b"])
    rep = split_frequency_importance(forest_of([(0, (1, None, None), None), (1, (0, None, None), None)], schema))
    assert rep.raw[0] == rep.raw[1]


def test_indicator_columns_fold_into_covariate():
    schema = CovariateSchema((Covariate("a"), Covariate("g", CATEGORICAL, ("p", "q", "r"))))
    rep = split_frequency_importance(forest_of([(1, None, None), (3, None, None), (0, None, None)], schema))
    assert rep.variables == ("a", "g")
    np.testing.assert_allclose(rep.raw, np.array([1, 2]) / 3 / WEIGHT_TOTAL, atol=1e-15)


def test_full_depth_sums_to_one():
    counts = np.array([[3, 1], [2, 2], [1, 0], [0, 5]])
    assert column_importance(counts).sum() == pytest.approx(1.0, abs=1e-12)


def test_fitted_forest_sums_at_most_one():
    data = make_dataset(n=300, p=6, seed=4, effect=lambda x: x[:, 2])
    rep = split_frequency_importance(fit_causal_forest(data, ForestParams(num_trees=100, bag_size=1)))
    assert rep.raw.sum() <= 1 + 1e-12
    assert (rep.raw >= 0).all()
    assert np.array_equal(np.argsort(rep.scaled, kind="stable"), np.argsort(rep.raw, kind="stable"))


def test_depth_capped_fit_matches_full_fit():
    data = make_dataset(n=300, p=5, seed=6, effect=lambda x: x[:, 1])
    params = ForestParams(num_trees=60, bag_size=1, seed=3)
    full = split_frequency_importance(fit_causal_forest(data, params)).raw
    np.testing.assert_array_equal(imp._importance_fit(data, params, 1), full)


def test_counting_rule_is_strict(monkeypatch):
    data = make_dataset(n=50, p=3, seed=0)
    seq = iter([np.array([0.3, 0.0, 0.5]),
                np.array([0.3, 0.1, 0.6]), np.array([0.4, 0.0, 0.1]),
                np.array([0.2, 0.2, 0.5]), np.array([0.3, 0.0, 0.9])])
    monkeypatch.setattr(imp, "_importance_fit", lambda *a, **k: next(seq))
    rep = permutation_pvalues(data, PermutationTestConfig(4, ForestParams(num_trees=2, bag_size=1)))
    np.testing.assert_allclose(rep.p_value, [1 / 4, 2 / 4, 2 / 4])
    assert rep.replicates.shape == (4, 3)


def test_smoothed_pvalues(monkeypatch):
    data = make_dataset(n=50, p=1, seed=0)
    seq = iter([np.array([0.5]), np.array([0.1]), np.array([0.9])])
    monkeypatch.setattr(imp, "_importance_fit", lambda *a, **k: next(seq))
    cfg = PermutationTestConfig(2, ForestParams(num_trees=2, bag_size=1), smoothed=True)
    assert permutation_pvalues(data, cfg).p_value[0] == pytest.approx(2 / 3)


def test_permutation_config_validation():
    with pytest.raises(ValueError):
        PermutationTestConfig(num_permutations=0)


def test_permutation_test_deterministic_across_workers():
    data = make_dataset(n=120, p=3, seed=2, effect=lambda x: x[:, 1])
    cfg = PermutationTestConfig(6, ForestParams(num_trees=30, bag_size=1, seed=1), seed=9)
    a, b = permutation_pvalues(data, cfg, workers=1), permutation_pvalues(data, cfg, workers=3)
    np.testing.assert_array_equal(a.p_value, b.p_value)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert ((a.p_value >= 0) & (a.p_value <= 1)).all()
    frame = a.replicate_frame()
    assert len(frame) == 6 * 3 and list(frame.columns) == ["replicate", "variable", "raw_importance"]


@pytest.mark.slow
def test_null_pvalues_roughly_uniform():
    pvals = []
    for s in range(40):
        data = make_dataset(n=100, p=3, seed=500 + s)
        data = data.with_outcome(np.random.default_rng(s).normal(size=data.n))
        cfg = PermutationTestConfig(19, ForestParams(num_trees=40, bag_size=1, seed=s,
                                                     tree_params=TreeParams(min_treat_control_per_leaf=3)),
                                    seed=s)
        pvals.append(permutation_pvalues(data, cfg).p_value[0])
    assert kstest(pvals, "uniform").pvalue > 0.01


def test_report_frame():
    rep = ImportanceReport(("a", "b"), np.array([0.2, 0.4]), np.array([0.5, 0.01]))
    df = rep.to_frame()
    assert list(df.columns) == ["variable", "raw_importance", "scaled_importance", "p_value"]
    assert df.scaled_importance.tolist() == [50.0, 100.0]
