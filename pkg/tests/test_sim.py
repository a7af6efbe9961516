import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from uacqr.conformal import MethodSpec, contains
from uacqr.metrics import coverage, two_sample_t
from uacqr.pipeline import run_forest_split
from uacqr.qrf import ForestParams, fit_forest
from uacqr.sim import (SimConfig, normal_ppf, oracle_interval, run_trials, sample_sim, sim_mean,
                       write_sim_outputs)

SMALL = dict(n_train=40, n_cal=40, n_test=30, forest=ForestParams(n_trees=20, min_samples_leaf=5))


@given(st.floats(1e-12, 1 - 1e-12))
def test_normal_ppf_against_ndtri(p):
    assert abs(normal_ppf(p) - special.ndtri(p)) < 1e-9


def test_normal_ppf_grid_and_errors():
    p = np.concatenate([np.linspace(1e-6, 1 - 1e-6, 2001), [1e-15, 0.5, 0.975]])
    err = max(abs(normal_ppf(v) - special.ndtri(v)) for v in p)
    assert err < 1e-9
    assert normal_ppf(0.5) == 0
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            normal_ppf(bad)


def test_sample_support_and_determinism():
    a = sample_sim(5000, np.random.default_rng(1))
    b = sample_sim(5000, np.random.default_rng(1))
    x = a.features[:, 0]
    assert np.all((x > 0) & (x < 1))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.response, b.response)
    with pytest.raises(ValueError):
        sample_sim(0, np.random.default_rng(0))


def test_beta_mean():
    x = sample_sim(10**6, np.random.default_rng(2)).features[:, 0]
    assert abs(x.mean() - 0.6) < 0.002


def test_response_distribution():
    d = sample_sim(200000, np.random.default_rng(3))
    x = d.features[:, 0]
    z = (d.response - sim_mean(x)) / x**2
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_oracle_examples():
    band = oracle_interval(np.array([1.0]), 0.1)
    assert band.lower[0] == pytest.approx(-0.803383, abs=1e-5)
    assert band.upper[0] == pytest.approx(2.486325, abs=1e-5)
    w = oracle_interval(np.array([0.5, 1.0]), 0.1).width
    assert w[0] == pytest.approx(w[1] / 4, rel=1e-15)
    assert w[1] == pytest.approx(2 * special.ndtri(0.95), rel=1e-12)
    for bad in ([0.0], [-0.5], [np.nan]):
        with pytest.raises(ValueError):
            oracle_interval(np.array(bad), 0.1)


def test_oracle_coverage_marginal_and_per_bin():
    d = sample_sim(10**6, np.random.default_rng(4))
    x, y = d.features[:, 0], d.response
    hit = contains(oracle_interval(x, 0.1), y)
    assert abs(hit.mean() - 0.9) < 0.002
    which = np.minimum((x * 20).astype(int), 19)
    for b in range(20):
        assert abs(hit[which == b].mean() - 0.9) < 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_cal=0)
    with pytest.raises(ValueError):
        SimConfig(alpha=1.0)
    with pytest.raises(ValueError):
        SimConfig(methods=())
    with pytest.raises(ValueError):
        SimConfig(uacqr_s_base="median")
    assert SimConfig(methods=("cqr", "uacqr-s-iqr")).methods[1] == MethodSpec("uacqr-s", "iqr")


def test_single_trial_single_point():
    res = run_trials(SimConfig(trials=1, n_test=1, **{k: v for k, v in SMALL.items() if k != "n_test"}))
    assert len(res.rows) == 7
    assert sorted(r.method for r in res.rows) == sorted(m.name for m in res.config.methods)
    for r in res.rows:
        assert r.n_test == 1 and r.coverage in (0.0, 1.0)
        assert r.bin_count.sum() == 1


def test_run_trials_deterministic_across_threads():
    a = run_trials(SimConfig(trials=4, seed=9, **SMALL))
    b = run_trials(SimConfig(trials=4, seed=9, n_jobs=3, **SMALL))
    c = run_trials(SimConfig(trials=4, seed=10, **SMALL))
    key = lambda res: [(r.trial, r.method, r.coverage, r.avg_width, r.t_hat, r.chosen_t) for r in res.rows]
    assert key(a) == key(b)
    assert key(a) != key(c)
    assert [r.trial for r in a.rows] == sorted(r.trial for r in a.rows)


def test_summary_consistent_with_rows(tmp_path):
    res = run_trials(SimConfig(trials=3, n_bins=4, **SMALL))
    for s in res.summary:
        rows = res.rows_for(s.method)
        assert s.trials == 3
        assert s.coverage == pytest.approx(np.mean([r.coverage for r in rows]))
        assert s.pooled_coverage == sum(r.n_covered for r in rows) / sum(r.n_test for r in rows)
        assert sum(b.count for b in res.bins if b.method == s.method) == 3 * SMALL["n_test"]
    assert res.bin_for("cqr", 0.75, 1.0).bin_hi == 1.0
    paths = write_sim_outputs(res, tmp_path)
    header = paths["per_bin"].read_text().splitlines()[0]
    assert header == "method,bin_lo,bin_hi,coverage,mean_width,count"
    assert len(paths["results"].read_text().splitlines()) == 1 + 3 * 7


def test_constant_response_mean_abs_matches_cqr():
    rng = np.random.default_rng(5)
    X = rng.uniform(size=(60, 1))
    y = np.full(60, 2.5)
    model = fit_forest(X[:20], y[:20], ForestParams(n_trees=10))
    runs = run_forest_split(model, X[20:40], y[20:40], X[40:], [MethodSpec("mean-abs"), MethodSpec("cqr")],
                            0.1, False, np.random.SeedSequence(0))
    ma, cqr = runs
    assert ma.calibration.t_hat == cqr.calibration.t_hat
    np.testing.assert_array_equal(contains(ma.bands, y[40:]), contains(cqr.bands, y[40:]))
    np.testing.assert_array_equal(ma.bands.lower, cqr.bands.lower)


def _swap_coverage(trial, swap):
    ss = np.random.SeedSequence(77, spawn_key=(trial,))
    rng = np.random.default_rng(ss)
    d = sample_sim(160, rng)
    X, y = d.features, d.response
    model = fit_forest(X[:60], y[:60], ForestParams(n_trees=15, min_samples_leaf=5, seed=trial))
    a, b = slice(60, 110), slice(110, 160)
    cal, test = (b, a) if swap else (a, b)
    run, = run_forest_split(model, X[cal], y[cal], X[test], [MethodSpec("cqr")], 0.1, True,
                            np.random.SeedSequence(78, spawn_key=(trial,)))
    return coverage(run.bands, y[test])


def test_exchangeability_of_cal_and_test_roles():
    plain = [_swap_coverage(t, False) for t in range(200)]
    swapped = [_swap_coverage(t, True) for t in range(200)]
    _, p = two_sample_t(plain, swapped)
    assert p > 0.001
    assert abs(np.mean(plain) - 0.9) < 0.02 and abs(np.mean(swapped) - 0.9) < 0.02
