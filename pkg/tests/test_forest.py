import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmprop.forest import (LEAF, ForestConfig, RegressionTree, build_tree,
                           cv_scores, feature_importances, fit_forest,
                           forest_from_payload, forest_to_payload, grid_search,
                           predict, topn_select)


def brute_force_best(X, y, min_leaf):
    """Exhaustive split search with plain loops."""
    n = len(y)
    parent = float(np.var(y))
    cands = []
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2
            left = y[X[:, f] <= thr]
            right = y[X[:, f] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            d = parent - (len(left) * np.var(left) + len(right) * np.var(right)) / n
            cands.append((d, f, thr))
    if not cands or max(c[0] for c in cands) <= 1e-12:
        return 0.0, []
    top = max(c[0] for c in cands)
    # splits tied up to rounding are all acceptable
    return top, [(f, t) for d, f, t in cands if d >= top - 1e-10]


def node_rows(tree, X, node):
    return np.flatnonzero(_reaches(tree, X, node))


def _reaches(tree, X, target):
    out = np.zeros(X.shape[0], dtype=bool)
    for r in range(X.shape[0]):
        node = 0
        while True:
            if node == target:
                out[r] = True
                break
            f = tree.feature[node]
            if f == LEAF:
                break
            node = tree.left[node] if X[r, f] <= tree.threshold[node] else tree.right[node]
    return out


def test_constant_target_gives_single_leaves():
    X = np.random.default_rng(0).normal(size=(20, 3))
    forest = fit_forest(X, np.full(20, 7.0), ForestConfig(n_estimators=10))
    assert forest.constant_target
    assert all(t.n_nodes == 1 for t in forest.trees)
    np.testing.assert_array_equal(predict(forest, X), 7.0)
    rep = feature_importances(forest)
    assert rep.no_splits and rep.importances.sum() == 0


def test_separable_step_is_learned_exactly():
    X = np.arange(10, dtype=float)[:, None]
    y = np.where(X[:, 0] < 5, 0.0, 1.0)
    tree = build_tree(X, y, ForestConfig(min_samples_leaf=1), np.random.default_rng(0))
    assert tree.n_splits == 1
    assert tree.threshold[0] == 4.5
    np.testing.assert_array_equal(tree.predict(X), y)


def test_memorization_without_bootstrap():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    cfg = ForestConfig(n_estimators=3, max_depth=None, min_samples_leaf=1, bootstrap=False)
    np.testing.assert_allclose(predict(fit_forest(X, y, cfg), X), y)


def test_forest_prediction_is_mean_of_trees():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 3))
    y = X[:, 0] + rng.normal(scale=0.1, size=30)
    forest = fit_forest(X, y, ForestConfig(n_estimators=7, seed=5))
    manual = np.mean([t.predict(X) for t in forest.trees], axis=0)
    np.testing.assert_allclose(predict(forest, X), manual)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(6, 50), st.integers(1, 3))
def test_every_split_matches_brute_force(seed, n, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(n, 3)).astype(float)
    y = rng.normal(size=n)
    cfg = ForestConfig(min_samples_leaf=min_leaf, max_depth=None)
    tree = build_tree(X, y, cfg, rng)
    for node in range(tree.n_nodes):
        rows = node_rows(tree, X, node)
        d, best = brute_force_best(X[rows], y[rows], min_leaf)
        if tree.feature[node] == LEAF:
            assert not best or len(rows) < cfg.min_samples_split
        else:
            assert tree.delta[node] == pytest.approx(d, abs=1e-10)
            assert tree.delta[node] >= 0
            assert (tree.feature[node], tree.threshold[node]) in best


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    tree = build_tree(X, y, ForestConfig(min_samples_leaf=5, max_depth=None), rng)
    leaves = tree.feature == LEAF
    assert tree.n_samples[leaves].min() >= 5


def test_single_informative_feature_dominates_importance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 10))
    y = 3 * X[:, 5] + rng.normal(scale=0.01, size=200)
    forest = fit_forest(X, y, ForestConfig(n_estimators=100, seed=1))
    rep = feature_importances(forest, labels=[f"x{j}" for j in range(10)])
    assert rep.importances.sum() == pytest.approx(1.0)
    assert rep.ranking[0] == 5 and rep.importances[5] > 0.9
    assert rep.to_csv().splitlines()[1].startswith("1,5,x5,")


def test_importance_matches_manual_delta_sum():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 3))
    y = X[:, 0] * X[:, 1]
    forest = fit_forest(X, y, ForestConfig(n_estimators=5))
    manual = np.zeros(3)
    for t in forest.trees:
        for node in range(t.n_nodes):
            if t.feature[node] != LEAF:
                manual[t.feature[node]] += t.delta[node]
    manual /= manual.sum()
    np.testing.assert_allclose(feature_importances(forest).importances, manual)


def test_duplicate_column_takes_the_lower_index():
    rng = np.random.default_rng(7)
    x = rng.normal(size=80)
    X = np.column_stack([rng.normal(size=80), x, x])
    forest = fit_forest(X, 2 * x, ForestConfig(n_estimators=20))
    imp = feature_importances(forest).importances
    assert imp[1] > 0.9 and imp[2] == 0.0


def test_pure_noise_spreads_importance():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(150, 20))
    y = rng.normal(size=150)
    imp = feature_importances(fit_forest(X, y, ForestConfig(n_estimators=100))).importances
    assert imp.max() < 0.25


def test_first_and_higher_order_rankings():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(80, 6))
    y = X[:, 4] + 0.5 * X[:, 1]
    rep = feature_importances(fit_forest(X, y, ForestConfig(n_estimators=30)),
                              first_order=[0, 1, 2])
    assert rep.first_order_ranking[0] == 1
    assert rep.higher_order_ranking[0] == 4
    assert sorted(rep.first_order_ranking.tolist() + rep.higher_order_ranking.tolist()) == list(range(6))


def test_seed_determinism_and_worker_invariance():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(60, 5))
    y = X[:, 0] + rng.normal(size=60)
    cfg = ForestConfig(n_estimators=12, features_per_split="third", seed=3)
    a = fit_forest(X, y, cfg, n_jobs=1)
    b = fit_forest(X, y, cfg, n_jobs=4)
    assert forest_to_payload(a) == forest_to_payload(b)
    c = fit_forest(X, y, ForestConfig(n_estimators=12, features_per_split="third", seed=4))
    assert forest_to_payload(a) != forest_to_payload(c)


def test_training_mse_not_above_target_variance():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(70, 4))
    y = np.sin(X[:, 0]) + rng.normal(scale=0.3, size=70)
    yhat = predict(fit_forest(X, y, ForestConfig(n_estimators=30)), X)
    assert np.mean((y - yhat) ** 2) <= np.var(y)


def test_payload_round_trip():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(30, 3))
    y = X[:, 2]
    forest = fit_forest(X, y, ForestConfig(n_estimators=4))
    again = forest_from_payload(forest_to_payload(forest))
    np.testing.assert_array_equal(predict(again, X), predict(forest, X))
    tree = forest.trees[0]
    assert RegressionTree.from_rows(tree.to_rows()).to_rows() == tree.to_rows()


def test_shape_errors():
    with pytest.raises(ValueError):
        fit_forest(np.zeros((3, 2)), np.zeros(4))
    forest = fit_forest(np.eye(3), [1.0, 2.0, 3.0], ForestConfig(n_estimators=2))
    with pytest.raises(ValueError):
        predict(forest, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        ForestConfig(min_samples_split=1)


def test_grid_search_prefers_depth_on_xor():
    rng = np.random.default_rng(13)
    X = rng.integers(0, 2, size=(120, 2)).astype(float)
    y = np.logical_xor(X[:, 0], X[:, 1]).astype(float) + rng.normal(scale=0.05, size=120)
    res = grid_search(X, y, {"max_depth": [1, 30], "n_estimators": [20]}, folds=4, seed=0)
    assert res.best.max_depth == 30
    assert len(res.table) == 2
    shallow, deep = res.table
    assert deep["mean_cv_r2"] > shallow["mean_cv_r2"]
    assert res.to_csv().splitlines()[0] == "max_depth,n_estimators,mean_cv_r2"


def test_grid_search_rejects_empty_grid():
    with pytest.raises(ValueError):
        grid_search(np.eye(4), np.arange(4.0), {"max_depth": []})


def mean_trainer(Xtr, ytr, Xva):
    return np.full(Xva.shape[0], ytr.mean())


def lstsq_trainer(Xtr, ytr, Xva):
    A = np.column_stack([Xtr, np.ones(len(Xtr))])
    coef, *_ = np.linalg.lstsq(A, ytr, rcond=None)
    return np.column_stack([Xva, np.ones(len(Xva))]) @ coef


def test_topn_constant_trainer_picks_smallest_subset():
    # the same R^2 at every size, so the penalty favours the fewest features
    rng = np.random.default_rng(14)
    X1, X2 = rng.normal(size=(60, 6)), rng.normal(size=(60, 6))
    y = rng.normal(size=60)
    res = topn_select(X1, X2, y, mean_trainer, start=2, step=2, mode="joint")
    assert (res.best_m, res.best_n) == (2, 2)
    assert len(res.trace) == 9


def test_topn_joint_and_merged_recover_informative_columns():
    rng = np.random.default_rng(15)
    X1, X2 = rng.normal(size=(150, 8)), rng.normal(size=(150, 8))
    y = X1[:, 0] + X1[:, 1] + X2[:, 0] + rng.normal(scale=0.1, size=150)
    res = topn_select(X1, X2, y, lstsq_trainer, start=2, step=2, mode="joint",
                      labels1=[f"a{j}" for j in range(8)], labels2=[f"b{j}" for j in range(8)])
    assert res.selected_labels[:2] == ["a0", "a1"] and "b0" in res.selected_labels
    imp = np.r_[[0.3, 0.3] + [0.01] * 6, [0.3] + [0.01] * 7]
    res = topn_select(X1, X2, y, lstsq_trainer, start=1, step=1, mode="merged", importances=imp)
    assert sorted(res.selected_columns) == [0, 1, 8]
    assert res.trace_csv().splitlines()[0] == "m,n,k,r2,adjusted_r2"


def test_topn_retain_all_first():
    rng = np.random.default_rng(16)
    X1, X2 = rng.normal(size=(40, 3)), rng.normal(size=(40, 5))
    res = topn_select(X1, X2, rng.normal(size=40), mean_trainer, start=2, step=2,
                      retain_all_first=True)
    assert {t["m"] for t in res.trace} == {3}


def test_topn_start_beyond_block_uses_whole_block():
    rng = np.random.default_rng(18)
    X1, X2 = rng.normal(size=(30, 3)), rng.normal(size=(30, 4))
    res = topn_select(X1, X2, rng.normal(size=30), mean_trainer, start=5)
    assert [(t["m"], t["n"]) for t in res.trace] == [(3, 4)]
    res = topn_select(X1, X2, rng.normal(size=30), mean_trainer, start=20, mode="merged",
                      importances=np.ones(7))
    assert [t["k"] for t in res.trace] == [7]


def test_cv_scores_adjusted_nan_when_too_many_columns():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(8, 7))
    r, adj = cv_scores(X, rng.normal(size=8), mean_trainer, folds=4)
    assert np.isnan(adj)
