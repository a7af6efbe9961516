import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from uacqr.ensemble import (EnsembleFormatError, EnsembleQuantiles, TargetQuantiles, aggregate_mean,
                            dispersion, empirical_quantile, isotonize, load_external_ensemble,
                            order_statistic)


def ens(lo, hi=None):
    lo = np.asarray(lo, float)
    return EnsembleQuantiles(lo, lo + 1 if hi is None else np.asarray(hi, float))


def brute_quantile(values, a):
    """min{v : #{u <= v} / B >= a} over the values themselves."""
    v = sorted(values)
    for x in v:
        if sum(u <= x for u in v) / len(v) >= a:
            return x


def test_target_quantiles():
    t = TargetQuantiles.central(0.1)
    assert (t.alpha_lo, t.alpha_hi) == (0.05, 0.95)
    with pytest.raises(ValueError):
        TargetQuantiles(0.6, 0.4)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        EnsembleQuantiles(np.array([1.0, np.nan]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        EnsembleQuantiles(np.array([1.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        EnsembleQuantiles(np.array([]), np.array([]))


def test_aggregate_mean_examples():
    assert aggregate_mean(ens([1, 3]))[0] == 2
    assert aggregate_mean(ens([7.25]))[0] == 7.25
    assert aggregate_mean(ens([-1, 0, 1]))[0] == 0


def test_dispersion_examples():
    assert dispersion(ens([1, 3]), "stddev")[0] == 1.0
    assert dispersion(ens([2, 2, 2]), "stddev") == (0.0, 0.0)
    assert dispersion(ens([2, 2, 2]), "iqr") == (0.0, 0.0)
    # brute-force empirical CDF: F >= 0.25 first at 0, F >= 0.75 first at 2
    assert brute_quantile([0, 1, 2, 3], 0.75) - brute_quantile([0, 1, 2, 3], 0.25) == 2
    assert dispersion(ens([0, 1, 2, 3]), "iqr")[0] == 2
    with pytest.raises(ValueError):
        dispersion(ens([1, 2]), "mad")


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.floats(1e-6, 1.0))
def test_empirical_quantile_brute_force(values, a):
    assert empirical_quantile(np.array(values, float), a) == brute_quantile(values, a)


def test_order_statistic_examples():
    e = ens([3, 1, 2])
    assert order_statistic(e, "lo", 0) == -math.inf
    assert order_statistic(e, "lo", 2) == 2
    assert order_statistic(e, "lo", 4) == math.inf
    with pytest.raises(ValueError):
        order_statistic(e, "lo", 5)
    with pytest.raises(ValueError):
        order_statistic(e, "mid", 1)


def test_order_statistic_batched():
    e = EnsembleQuantiles(np.array([[3.0, 1.0], [0.0, 5.0]]), np.zeros((2, 2)))
    np.testing.assert_array_equal(order_statistic(e, "lo", 1), [1, 0])
    np.testing.assert_array_equal(order_statistic(e, "lo", 3), [np.inf, np.inf])


members = arrays(np.float64, st.integers(1, 15), elements=st.floats(-1e6, 1e6))


@given(members)
def test_order_statistic_monotone(lo):
    e = ens(lo)
    vals = [order_statistic(e, "lo", b) for b in range(e.B + 2)]
    assert all(u <= v for u, v in zip(vals, vals[1:]))


@given(members, st.sampled_from(["stddev", "iqr"]))
def test_dispersion_nonnegative_and_zero_iff_constant(lo, kind):
    g = dispersion(ens(lo), kind)[0]
    assert g >= 0
    if kind == "stddev":
        assert (g == 0) == (np.ptp(lo) == 0)
    else:
        assert (g == 0) == (empirical_quantile(lo, 0.75) == empirical_quantile(lo, 0.25))


@given(arrays(np.float64, st.integers(1, 12), elements=st.integers(-1000, 1000).map(float)),
       st.sampled_from([0.5, 2.0, 4.0]), st.integers(-100, 100).map(float))
def test_affine_equivariance(lo, c, d):
    # dyadic scale and integer data keep the arithmetic exact
    e, f = ens(lo), ens(c * lo + d)
    for kind in ("stddev", "iqr"):
        assert dispersion(f, kind)[0] == pytest.approx(c * dispersion(e, kind)[0], rel=1e-12, abs=1e-9)
    for b in range(1, e.B + 1):
        assert order_statistic(f, "lo", b) == c * order_statistic(e, "lo", b) + d


def test_isotonize_examples():
    assert isotonize(2.0, 5.0) == (2.0, 5.0)
    assert isotonize(5.0, 2.0) == (3.5, 3.5)
    assert isotonize(4.0, 4.0) == (4.0, 4.0)
    lo, hi = isotonize(np.array([1.0, 6.0]), np.array([2.0, 0.0]))
    np.testing.assert_array_equal(lo, [1.0, 3.0])
    np.testing.assert_array_equal(hi, [2.0, 3.0])


# -- external ensembles ----------------------------------------------------------

def long_csv(tmp_path, rows, header="point_id,member_id,side,value"):
    p = tmp_path / "ens.csv"
    p.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return p


def grid(points=2, B=3):
    return [(p, m, s, 10 * p + m + (0.5 if s == "hi" else 0.0))
            for p in range(points) for m in range(B) for s in ("lo", "hi")]


def test_external_complete(tmp_path):
    table = load_external_ensemble(long_csv(tmp_path, grid()))
    assert set(table) == {"0", "1"}
    assert table["1"].B == 3
    np.testing.assert_array_equal(table["1"].lo, [10, 11, 12])
    np.testing.assert_array_equal(table["1"].hi, [10.5, 11.5, 12.5])


def test_external_numeric_member_order(tmp_path):
    rows = [(0, m, s, m) for m in (10, 2, 1) for s in ("lo", "hi")]
    np.testing.assert_array_equal(load_external_ensemble(long_csv(tmp_path, rows))["0"].lo, [1, 2, 10])


def test_external_missing_cell(tmp_path):
    rows = [r for r in grid() if r[:3] != (1, 2, "hi")]
    with pytest.raises(EnsembleFormatError, match="point 1 is missing member 2, side hi"):
        load_external_ensemble(long_csv(tmp_path, rows))


def test_external_inconsistent_B(tmp_path):
    rows = [r for r in grid() if not (r[0] == 1 and r[1] == 2)]
    with pytest.raises(EnsembleFormatError, match="2 members, expected 3"):
        load_external_ensemble(long_csv(tmp_path, rows))


@pytest.mark.parametrize("bad, pattern", [
    ((0, 0, "lo", "inf"), "non-finite"),
    ((0, 0, "lo", "abc"), "non-numeric"),
    ((0, 0, "mid", 1.0), "side must be"),
    ((0, 0, "lo", 1.0), "duplicate"),
])
def test_external_bad_rows(tmp_path, bad, pattern):
    with pytest.raises(EnsembleFormatError, match=pattern):
        load_external_ensemble(long_csv(tmp_path, grid() + [bad]))


def test_external_bad_header(tmp_path):
    with pytest.raises(EnsembleFormatError, match="header"):
        load_external_ensemble(long_csv(tmp_path, grid(), header="a,b,c,d"))
