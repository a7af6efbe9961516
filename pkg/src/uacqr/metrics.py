"""Coverage, width and interval-score summaries of prediction bands."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .conformal import IntervalBand, contains


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    coverage: float  # nan for an empty bin
    mean_width: float
    count: int
    n_covered: int


@dataclass
class EvaluationReport:
    coverage: float
    avg_width: float
    frac_infinite_width: float
    mean_isl: float
    n_isl_excluded: int
    cw_correlation: float
    cw_degenerate: bool
    n: int
    per_bin: list[BinStat] = field(default_factory=list)


def _check_lengths(bands: IntervalBand, ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if len(bands) != len(ys):
        raise ValueError(f"{len(bands)} bands but {len(ys)} responses")
    if len(ys) == 0:
        raise ValueError("need at least one point")
    return ys


def coverage(bands: IntervalBand, ys) -> float:
    ys = _check_lengths(bands, ys)
    return float(np.mean(contains(bands, ys)))


def interval_score_loss(bands: IntervalBand, ys, alpha: float) -> np.ndarray:
    """Width plus ``2/alpha`` times the distance by which y misses the band.

    Raises for bands with an infinite endpoint; see
    :func:`mean_interval_score_loss` for the excluding variant.
    """
    ys = np.asarray(ys, dtype=float)
    lo, hi = np.asarray(bands.lower), np.asarray(bands.upper)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("interval score loss is undefined for infinite endpoints")
    below = (lo - ys) * (ys < lo)
    above = (ys - hi) * (ys > hi)
    return bands.width + (2 / alpha) * below + (2 / alpha) * above


def mean_interval_score_loss(bands: IntervalBand, ys, alpha: float) -> tuple[float, int]:
    """Mean loss over bands with finite endpoints, and how many were skipped."""
    ys = _check_lengths(bands, ys)
    finite = np.isfinite(bands.lower) & np.isfinite(bands.upper)
    n_skip = int(np.sum(~finite))
    if n_skip == len(ys):
        return float("nan"), n_skip
    return float(np.mean(interval_score_loss(bands[finite], ys[finite], alpha))), n_skip


def coverage_width_correlation(bands: IntervalBand, ys) -> tuple[float, bool]:
    """|Pearson correlation| between the coverage indicator and the width.

    Returns ``(0.0, True)`` when either variable is constant over the points
    with finite width.
    """
    ys = _check_lengths(bands, ys)
    if len(ys) < 2:
        raise ValueError("need at least two points")
    width = bands.width
    keep = np.isfinite(width)
    hit = contains(bands, ys)[keep].astype(float)
    width = width[keep]
    if len(width) < 2 or np.ptp(hit) == 0 or np.ptp(width) == 0:
        return 0.0, True
    return float(abs(np.corrcoef(hit, width)[0, 1])), False


def binned_conditional_coverage(xs, bands: IntervalBand, ys, n_bins: int = 20,
                                x_range: tuple[float, float] | None = None) -> list[BinStat]:
    """Coverage, mean width and count over equal-width bins of a 1-D feature.

    Bins span ``[min x, max x]`` unless ``x_range`` is given; the last bin is
    closed on the right. Points outside ``x_range`` are dropped.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = _check_lengths(bands, ys)
    if len(xs) != len(ys):
        raise ValueError("xs and ys differ in length")
    lo, hi = (float(xs.min()), float(xs.max())) if x_range is None else x_range
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, n_bins - 1)
    inside = (xs >= lo) & (xs <= hi)
    hit = contains(bands, ys)
    width = bands.width
    out = []
    for b in range(n_bins):
        sel = inside & (which == b)
        count = int(sel.sum())
        if count:
            finite = sel & np.isfinite(width)
            mean_width = float(width[finite].mean()) if finite.any() else float("inf")
            out.append(BinStat(edges[b], edges[b + 1], float(hit[sel].mean()),
                               mean_width, count, int(hit[sel].sum())))
        else:
            out.append(BinStat(edges[b], edges[b + 1], float("nan"), float("nan"), 0, 0))
    return out


def evaluate(bands: IntervalBand, ys, alpha: float, xs=None, n_bins: int = 20,
             x_range: tuple[float, float] | None = None) -> EvaluationReport:
    ys = _check_lengths(bands, ys)
    width = bands.width
    finite = np.isfinite(width)
    isl, n_skip = mean_interval_score_loss(bands, ys, alpha)
    if len(ys) >= 2:
        corr, degenerate = coverage_width_correlation(bands, ys)
    else:
        corr, degenerate = 0.0, True
    per_bin = []
    if xs is not None:
        per_bin = binned_conditional_coverage(xs, bands, ys, n_bins, x_range)
    return EvaluationReport(
        coverage=coverage(bands, ys),
        avg_width=float(width[finite].mean()) if finite.any() else float("inf"),
        frac_infinite_width=float(np.mean(~finite)),
        mean_isl=isl,
        n_isl_excluded=n_skip,
        cw_correlation=corr,
        cw_degenerate=degenerate,
        n=len(ys),
        per_bin=per_bin,
    )


def two_sample_t(a, b) -> tuple[float, float]:
    """Welch t statistic and two-sided p-value for per-trial means."""
    res = stats.ttest_ind(np.asarray(a, dtype=float), np.asarray(b, dtype=float), equal_var=False)
    return float(res.statistic), float(res.pvalue)
