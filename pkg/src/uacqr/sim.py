"""Synthetic heteroscedastic benchmark with a closed-form oracle band.

X ~ Beta(1.2, 0.8) and Y | X ~ N(sin(X^-3), X^4). The conditional mean
oscillates ever faster as X -> 0, so fitted quantiles are least reliable
there; that is where epistemic-aware intervals should widen.
"""

from __future__ import annotations

import csv
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conformal import ALL_METHODS, IntervalBand, MethodSpec
from .data import Dataset
from .metrics import binned_conditional_coverage, evaluate
from .pipeline import UACQR_S_BASES, run_forest_split
from .qrf import ForestParams, fit_forest

BETA_A, BETA_B = 1.2, 0.8


def normal_ppf(p: float) -> float:
    """Standard normal quantile (Wichura's AS241, via the stdlib)."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    return statistics.NormalDist().inv_cdf(p)


def _beta(n: int, rng: np.random.Generator) -> np.ndarray:
    # Gamma ratio; a zero would make sin(x^-3) undefined, so redraw it
    x = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        g1 = rng.standard_gamma(BETA_A, size=todo.size)
        g2 = rng.standard_gamma(BETA_B, size=todo.size)
        draw = g1 / (g1 + g2)
        x[todo] = draw
        todo = todo[~(draw > 0)]
    return x


def sim_mean(x):
    return np.sin(np.asarray(x, dtype=float) ** -3)


def sample_sim(n: int, rng: np.random.Generator) -> Dataset:
    """n draws of (X, Y) with a single feature column."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = _beta(n, rng)
    z = rng.standard_normal(n)
    return Dataset(x.reshape(-1, 1), sim_mean(x) + x**2 * z)


def oracle_interval(x, alpha: float) -> IntervalBand:
    """Central 1-alpha band of Y | X = x: sin(x^-3) +- x^2 z_{1-alpha/2}."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("oracle interval needs x > 0")
    z = normal_ppf(1 - alpha / 2)
    m = sim_mean(x)
    return IntervalBand(m - x**2 * z, m + x**2 * z)


@dataclass
class SimConfig:
    n_train: int = 100
    n_cal: int = 100
    n_test: int = 200
    trials: int = 150
    alpha: float = 0.1
    seed: int = 0
    # Leaves of 10: with 5-point leaves on 100 training rows, over 10% of
    # responses often fall above every tree's upper quantile, so the UACQR-P
    # threshold lands on B + 1 and its deterministic bands are infinite.
    forest: ForestParams = field(default_factory=lambda: ForestParams(min_samples_leaf=10))
    methods: tuple[MethodSpec, ...] = ALL_METHODS
    randomized: bool = True
    n_bins: int = 20
    n_jobs: int = 1
    uacqr_s_base: str = "forest"

    def __post_init__(self):
        for name in ("n_train", "n_cal", "n_test", "trials", "n_bins", "n_jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not self.methods:
            raise ValueError("need at least one method")
        if self.uacqr_s_base not in UACQR_S_BASES:
            raise ValueError(f"uacqr_s_base must be one of {UACQR_S_BASES}")
        self.methods = tuple(m if isinstance(m, MethodSpec) else MethodSpec.parse(m)
                             for m in self.methods)


@dataclass
class TrialRow:
    trial: int
    method: str
    coverage: float
    n_covered: int
    n_test: int
    avg_width: float
    frac_infinite_width: float
    mean_isl: float
    n_isl_excluded: int
    cw_correlation: float
    t_hat: float
    chosen_t: float
    n_floored: int
    bin_count: np.ndarray
    bin_covered: np.ndarray
    bin_width_sum: np.ndarray


@dataclass
class BinSummary:
    method: str
    bin_lo: float
    bin_hi: float
    coverage: float  # mean of per-trial bin coverage over trials with points in the bin
    pooled_coverage: float
    mean_width: float
    count: int


@dataclass
class MethodSummary:
    method: str
    trials: int
    coverage: float
    coverage_se: float
    pooled_coverage: float
    avg_width: float
    avg_width_se: float
    mean_isl: float
    mean_isl_se: float
    cw_correlation: float
    frac_infinite_width: float


@dataclass
class SimResult:
    config: SimConfig
    rows: list[TrialRow]
    summary: list[MethodSummary]
    bins: list[BinSummary]

    def rows_for(self, method: str) -> list[TrialRow]:
        return [r for r in self.rows if r.method == method]

    def bin_for(self, method: str, lo: float, hi: float) -> BinSummary:
        for b in self.bins:
            if b.method == method and math.isclose(b.bin_lo, lo) and math.isclose(b.bin_hi, hi):
                return b
        raise KeyError(f"no bin [{lo}, {hi}] for {method}")


def _stream(seed: int, trial: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(trial, purpose))


def trial_runs(config: SimConfig, trial: int):
    """Fit and calibrate one trial; returns test x, test y and the method runs."""
    rng = np.random.default_rng(_stream(config.seed, trial, 0))
    n0, n1 = config.n_train, config.n_cal
    ds = sample_sim(n0 + n1 + config.n_test, rng)
    X, y = ds.features, ds.response
    forest_seed = int(_stream(config.seed, trial, 1).generate_state(1)[0])
    params = ForestParams(**{**config.forest.__dict__, "seed": forest_seed})
    model = fit_forest(X[:n0], y[:n0], params)
    runs = run_forest_split(model, X[n0:n0 + n1], y[n0:n0 + n1], X[n0 + n1:], config.methods,
                            config.alpha, config.randomized, _stream(config.seed, trial, 2),
                            config.uacqr_s_base)
    return X[n0 + n1:, 0], y[n0 + n1:], runs


def run_trial(config: SimConfig, trial: int) -> list[TrialRow]:
    x_test, y_test, runs = trial_runs(config, trial)
    rows = []
    for run in runs:
        rep = evaluate(run.bands, y_test, config.alpha)
        bins = binned_conditional_coverage(x_test, run.bands, y_test, config.n_bins, (0.0, 1.0))
        widths = np.array([b.mean_width * b.count if b.count else 0.0 for b in bins])
        cut = run.calibration.randomized
        rows.append(TrialRow(
            trial=trial, method=run.spec.name, coverage=rep.coverage,
            n_covered=int(round(rep.coverage * rep.n)), n_test=rep.n,
            avg_width=rep.avg_width, frac_infinite_width=rep.frac_infinite_width,
            mean_isl=rep.mean_isl, n_isl_excluded=rep.n_isl_excluded,
            cw_correlation=rep.cw_correlation, t_hat=run.calibration.t_hat,
            chosen_t=cut.chosen_t if cut is not None else run.calibration.t_hat,
            n_floored=run.calibration.n_floored,
            bin_count=np.array([b.count for b in bins]),
            bin_covered=np.array([b.n_covered for b in bins]),
            bin_width_sum=widths,
        ))
    return rows


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def summarize(config: SimConfig, rows: list[TrialRow]) -> tuple[list[MethodSummary], list[BinSummary]]:
    edges = np.linspace(0.0, 1.0, config.n_bins + 1)
    summary, bins = [], []
    for spec in config.methods:
        mine = [r for r in rows if r.method == spec.name]
        cov, cov_se = _mean_se([r.coverage for r in mine])
        wid, wid_se = _mean_se([r.avg_width for r in mine])
        isl, isl_se = _mean_se([r.mean_isl for r in mine])
        summary.append(MethodSummary(
            method=spec.name, trials=len(mine), coverage=cov, coverage_se=cov_se,
            pooled_coverage=sum(r.n_covered for r in mine) / sum(r.n_test for r in mine),
            avg_width=wid, avg_width_se=wid_se, mean_isl=isl, mean_isl_se=isl_se,
            cw_correlation=_mean_se([r.cw_correlation for r in mine])[0],
            frac_infinite_width=_mean_se([r.frac_infinite_width for r in mine])[0],
        ))
        count = np.array([r.bin_count for r in mine])
        covered = np.array([r.bin_covered for r in mine])
        wsum = np.array([r.bin_width_sum for r in mine])
        for b in range(config.n_bins):
            has = count[:, b] > 0
            total = int(count[:, b].sum())
            bins.append(BinSummary(
                method=spec.name, bin_lo=float(edges[b]), bin_hi=float(edges[b + 1]),
                coverage=float(np.mean(covered[has, b] / count[has, b])) if has.any() else float("nan"),
                pooled_coverage=covered[:, b].sum() / total if total else float("nan"),
                mean_width=wsum[:, b].sum() / total if total else float("nan"),
                count=total,
            ))
    return summary, bins


def run_trials(config: SimConfig) -> SimResult:
    """All trials, in trial order whatever the thread count."""
    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            per_trial = list(pool.map(lambda t: run_trial(config, t), range(config.trials)))
    else:
        per_trial = [run_trial(config, t) for t in range(config.trials)]
    rows = [r for trial_rows in per_trial for r in trial_rows]
    summary, bins = summarize(config, rows)
    return SimResult(config, rows, summary, bins)


# ---------------------------------------------------------------------------
# CSV output

TRIAL_COLUMNS = ("method", "trial", "coverage", "n_covered", "n_test", "avg_width",
                 "frac_infinite_width", "mean_isl", "n_isl_excluded", "cw_correlation",
                 "t_hat", "chosen_t", "n_floored")
SUMMARY_COLUMNS = ("method", "trials", "coverage", "coverage_se", "pooled_coverage", "avg_width",
                   "avg_width_se", "mean_isl", "mean_isl_se", "cw_correlation",
                   "frac_infinite_width")
BIN_COLUMNS = ("method", "bin_lo", "bin_hi", "coverage", "mean_width", "count")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, columns, records) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(getattr(rec, c)) for c in columns])


def write_sim_outputs(result: SimResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"results": out / "results.csv", "summary": out / "summary.csv",
             "per_bin": out / "per_bin.csv"}
    write_rows(paths["results"], TRIAL_COLUMNS, result.rows)
    write_rows(paths["summary"], SUMMARY_COLUMNS, result.summary)
    write_rows(paths["per_bin"], BIN_COLUMNS, result.bins)
    return paths
