import numpy as np
import pytest
from hypothesis import given, strategies as st

from uacqr.qrf import (ForestModel, ForestParams, conditional_cdf, fit_forest, forest_weights,
                       load_forest, per_tree_quantiles, predict_mean, predict_quantile,
                       save_forest)


def stump_forest(leaves, y):
    """Forest of single-leaf trees; ``leaves[b]`` lists (index, multiplicity)."""
    B = len(leaves)
    ptr = np.cumsum([0] + [len(l) for l in leaves])
    member = np.array([i for l in leaves for i, _ in l], np.int64)
    count = np.array([c for l in leaves for _, c in l], np.int64)
    return ForestModel(ForestParams(n_trees=B), 1, np.asarray(y, float),
                       np.full(B, -1, np.int64), np.zeros(B), np.full(B, -1, np.int64),
                       np.full(B, -1, np.int64), np.arange(B, dtype=np.int64),
                       ptr.astype(np.int64), member, count)


def walk(model, x, b):
    """Leaf reached by x in tree b, by a plain python traversal."""
    node = model.roots[b]
    while model.feature[node] >= 0:
        node = model.left[node] if x[model.feature[node]] <= model.threshold[node] else model.right[node]
    return node


def brute_weights(model, x):
    w = np.zeros(len(model.train_responses))
    B = model.n_trees
    for b in range(B):
        node = walk(model, x, b)
        a, z = model.idx_ptr[node], model.idx_ptr[node + 1]
        size = model.idx_count[a:z].sum()
        for i, c in zip(model.idx_member[a:z], model.idx_count[a:z]):
            w[i] += c / size / B
    return w


def brute_quantile(w, y, a):
    for v in np.sort(np.unique(y)):
        if w[y <= v].sum() >= a:
            return v
    return np.max(y[w > 0])


# -- spec examples on hand-built forests ---------------------------------------

def test_weights_single_leaf():
    m = stump_forest([[(3, 1), (7, 1)]], np.arange(10.0))
    w = forest_weights(m, [0.0])[0]
    expect = np.zeros(10)
    expect[[3, 7]] = 0.5
    np.testing.assert_array_equal(w, expect)


def test_weights_two_trees():
    m = stump_forest([[(1, 1)], [(2, 1)]], np.arange(4.0))
    np.testing.assert_array_equal(forest_weights(m, [0.0])[0], [0, 0.5, 0.5, 0])


def test_quantile_single_leaf():
    m = stump_forest([[(0, 1), (1, 1), (2, 1), (3, 1)]], [1.0, 2.0, 3.0, 4.0])
    assert predict_quantile(m, [0.0], 0.5)[0] == 2.0
    assert predict_quantile(m, [0.0], 0.05)[0] == 1.0
    assert predict_quantile(m, [0.0], 1.0)[0] == 4.0


def test_quantile_constant_responses():
    m = fit_forest(np.arange(20.0), np.full(20, 3.5), ForestParams(n_trees=5))
    for a in (0.01, 0.5, 1.0):
        assert np.all(predict_quantile(m, np.linspace(0, 19, 7), a) == 3.5)
    assert np.all(predict_mean(m, np.linspace(0, 19, 7)) == 3.5)


def test_per_tree_quantiles_leaf_example():
    y = np.array([1.0, 2.0, 2.0, 4.0, 0.0, 6.0])
    m = stump_forest([[(0, 1), (1, 1)], [(2, 1), (3, 1)], [(4, 1), (5, 1)]], y)
    np.testing.assert_array_equal(per_tree_quantiles(m, [0.0], 0.5)[0], [1, 2, 0])


def test_per_tree_singleton_leaf():
    m = stump_forest([[(0, 3)]], [5.0])
    for a in (0.01, 0.5, 1.0):
        assert per_tree_quantiles(m, [0.0], a)[0, 0] == 5.0


def test_cdf_examples():
    m = stump_forest([[(0, 1), (1, 1)]], [1.0, 3.0])
    assert conditional_cdf(m, [0.0], 2.0)[0] == 0.5
    assert conditional_cdf(m, [0.0], 0.0)[0] == 0.0
    assert conditional_cdf(m, [0.0], 10.0)[0] == 1.0


def test_mean_examples():
    assert predict_mean(stump_forest([[(0, 1), (1, 1)]], [1.0, 3.0]), [0.0])[0] == 2.0
    assert predict_mean(stump_forest([[(0, 1), (1, 3)]], [0.0, 4.0]), [0.0])[0] == 3.0


# -- fitting -------------------------------------------------------------------

def test_min_leaf_forces_single_leaf():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    m = fit_forest(X, np.array([1.0, 5.0, 2.0, 8.0]), ForestParams(n_trees=10, min_samples_leaf=4))
    assert np.all(m.feature == -1)
    assert np.all(m.leaf_size == 4)


def test_constant_y_single_leaf():
    rng = np.random.default_rng(0)
    m = fit_forest(rng.normal(size=(30, 3)), np.ones(30), ForestParams(n_trees=8))
    assert len(m.feature) == 8 and np.all(m.feature == -1)


def test_fit_rejects_empty_and_bad_mtry():
    with pytest.raises(ValueError):
        fit_forest(np.empty((0, 1)), np.empty(0))
    with pytest.raises(ValueError):
        fit_forest(np.ones((3, 2)), np.ones(3), ForestParams(mtry=3))
    with pytest.raises(ValueError):
        ForestParams(n_trees=0)


def structure(m):
    return [m.feature, m.threshold, m.left, m.right, m.roots, m.idx_ptr, m.idx_member, m.idx_count]


def test_fit_deterministic_and_thread_independent():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(60, 3)), rng.normal(size=60)
    params = ForestParams(n_trees=12, mtry=2, seed=9)
    a, b, c = fit_forest(X, y, params), fit_forest(X, y, params), fit_forest(X, y, params, n_jobs=3)
    for u, v, w in zip(structure(a), structure(b), structure(c)):
        np.testing.assert_array_equal(u, v)
        np.testing.assert_array_equal(u, w)


def test_seed_changes_forest():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(60, 2)), rng.normal(size=60)
    a = fit_forest(X, y, ForestParams(n_trees=3, seed=1))
    b = fit_forest(X, y, ForestParams(n_trees=3, seed=2))
    assert not np.array_equal(a.idx_count, b.idx_count) or not np.array_equal(a.threshold, b.threshold)


@pytest.mark.parametrize("msl", [1, 3, 7])
def test_leaf_invariants(msl):
    rng = np.random.default_rng(msl)
    X, y = rng.normal(size=(80, 2)), rng.normal(size=80)
    m = fit_forest(X, y, ForestParams(n_trees=10, min_samples_leaf=msl))
    leaves = m.feature < 0
    assert np.all(m.leaf_size[leaves] >= msl)
    assert np.all(m.leaf_size[leaves].reshape(-1).sum() == 80 * 10)
    assert np.all((m.idx_member >= 0) & (m.idx_member < 80))
    # routing: the kernel agrees with a python walk using x[f] <= thr goes left
    Q = rng.normal(size=(25, 2))
    ids = m.apply(Q)
    for j in range(25):
        assert [walk(m, Q[j], b) for b in range(10)] == ids[j].tolist()


def test_bootstrap_off_uses_all_rows_once():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(30, 1)), rng.normal(size=30)
    m = fit_forest(X, y, ForestParams(n_trees=2, bootstrap=False))
    for b in range(2):
        got = sorted(i for members in m.leaves(b).values() for i, c in members for _ in range(c))
        assert got == list(range(30))


def test_max_depth_zero_is_root_leaf():
    rng = np.random.default_rng(3)
    m = fit_forest(rng.normal(size=(30, 2)), rng.normal(size=30), ForestParams(n_trees=2, max_depth=0))
    assert np.all(m.feature == -1)


def test_root_split_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, p = 25, 3
        X, y = rng.normal(size=(n, p)), rng.normal(size=n)
        m = fit_forest(X, y, ForestParams(n_trees=1, bootstrap=False, max_depth=1, min_samples_leaf=2))
        best = (np.inf, None, None)
        for f in range(p):
            xs = np.unique(X[:, f])
            for lo, hi in zip(xs[:-1], xs[1:]):
                thr = (lo + hi) / 2
                left = X[:, f] <= thr
                if left.sum() < 2 or (~left).sum() < 2:
                    continue
                sse = left.sum() * y[left].var() + (~left).sum() * y[~left].var()
                if sse < best[0] - 1e-12:
                    best = (sse, f, thr)
        assert m.feature[0] == best[1]
        assert m.threshold[0] == best[2]


def test_split_tie_prefers_lowest_feature():
    # two identical features: equal criteria, the first must win
    x = np.arange(10.0)
    X = np.c_[x, x]
    y = np.r_[np.zeros(5), np.ones(5)]
    m = fit_forest(X, y, ForestParams(n_trees=1, bootstrap=False, max_depth=1))
    assert m.feature[0] == 0
    assert m.threshold[0] == 4.5


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(40, 2)), rng.normal(size=40)
    m = fit_forest(X, y, ForestParams(n_trees=6, min_samples_leaf=2, seed=4))
    path = tmp_path / "f.json"
    save_forest(m, path)
    back = load_forest(path)
    assert back.params == m.params
    for u, v in zip(structure(m) + [m.train_responses], structure(back) + [back.train_responses]):
        np.testing.assert_array_equal(u, v)
    Q = rng.normal(size=(10, 2))
    np.testing.assert_array_equal(predict_quantile(m, Q, 0.3), predict_quantile(back, Q, 0.3))


def test_load_rejects_other_versions(tmp_path):
    path = tmp_path / "f.json"
    path.write_text('{"format": "uacqr-forest", "version": 99}')
    with pytest.raises(ValueError, match="version"):
        load_forest(path)


# -- properties ------------------------------------------------------------------

@pytest.fixture(scope="module")
def forest():
    rng = np.random.default_rng(6)
    X = rng.uniform(size=(45, 2))
    y = np.round(rng.normal(size=45), 1)  # rounding creates ties
    return fit_forest(X, y, ForestParams(n_trees=15, min_samples_leaf=2, seed=1)), rng


def test_weights_sum_to_one(forest):
    m, rng = forest
    w = forest_weights(m, rng.uniform(size=(50, 2)))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_weights_match_python_oracle(forest):
    m, rng = forest
    Q = rng.uniform(size=(20, 2))
    w = forest_weights(m, Q)
    for j in range(20):
        np.testing.assert_allclose(w[j], brute_weights(m, Q[j]), rtol=0, atol=1e-15)


def test_mean_is_weighted_sum(forest):
    m, rng = forest
    Q = rng.uniform(size=(20, 2))
    for j in range(20):
        assert predict_mean(m, Q[j:j + 1])[0] == pytest.approx(brute_weights(m, Q[j]) @ m.train_responses,
                                                               rel=1e-12)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_quantile_monotone_in_level(forest, x0, x1, a, b):
    m, _ = forest
    lo, hi = min(a, b), max(a, b)
    q = [x0, x1]
    assert predict_quantile(m, q, lo)[0] <= predict_quantile(m, q, hi)[0]
    assert np.all(per_tree_quantiles(m, q, lo) <= per_tree_quantiles(m, q, hi))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0))
def test_quantile_cdf_duality(forest, x0, x1, a):
    m, _ = forest
    q = np.array([[x0, x1]])
    support = np.unique(m.train_responses)
    cdf = conditional_cdf(m, np.repeat(q, len(support), axis=0), support)
    assert predict_quantile(m, q, a)[0] == support[np.flatnonzero(cdf >= a)[0]]


def test_quantile_extended_levels(forest):
    m, _ = forest
    assert predict_quantile(m, [0.5, 0.5], 0.0)[0] == -np.inf
    assert predict_quantile(m, [0.5, 0.5], 1.5)[0] == np.inf


def test_monotone_transform_per_tree(forest):
    m, rng = forest
    g = lambda v: np.exp(v) + 2 * v
    mg = m.with_responses(g(m.train_responses))
    Q = rng.uniform(size=(30, 2))
    for a in (0.05, 0.5, 0.95):
        np.testing.assert_array_equal(per_tree_quantiles(mg, Q, a), g(per_tree_quantiles(m, Q, a)))
        np.testing.assert_array_equal(predict_quantile(mg, Q, a), g(predict_quantile(m, Q, a)))


def test_one_dimensional_queries():
    rng = np.random.default_rng(7)
    m = fit_forest(rng.uniform(size=30), rng.normal(size=30), ForestParams(n_trees=3))
    assert predict_quantile(m, np.linspace(0, 1, 5), 0.5).shape == (5,)
    with pytest.raises(ValueError):
        predict_quantile(m, np.ones((2, 2)), 0.5)
