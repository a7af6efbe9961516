"""Command-line experiment runner.

Three modes:

``simulate``
    Monte Carlo trials on the synthetic Beta/sine benchmark.
``evaluate``
    Load a CSV, transform the response, split 40/40/20, fit a forest,
    calibrate and score every method on the test block.
``crossval``
    Like ``evaluate`` but each method first picks ``min_samples_leaf`` from
    a grid by interval score loss on a 40/40/20 sub-split of the training
    block, then is refit on the full training block.

Settings come from defaults, then an optional ``--config`` file of
``key = value`` lines (``#`` starts a comment), then command-line flags.
``UACQR_OUT_DIR`` overrides the output directory unless ``--out`` is given.
The resolved settings are written to ``<out>/config.txt`` in the same
grammar, so ``--config <out>/config.txt`` reproduces a run.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import ALL_METHODS, Method, MethodSpec
from .data import TRANSFORMS, DataError, Dataset, DataSplit, fit_apply_transform, load_csv, split_dataset
from .ensemble import DISPERSIONS
from .metrics import evaluate as evaluate_bands
from .pipeline import UACQR_S_BASES, MethodRun, run_forest_split
from .qrf import ForestParams, fit_forest

OUT_ENV = "UACQR_OUT_DIR"
MODES = ("simulate", "evaluate", "crossval")


class ConfigError(ValueError):
    """Invalid or conflicting run settings."""


# ---------------------------------------------------------------------------
# configuration


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _parse_list(text))


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = tuple(float(s) for s in _parse_list(text))
    if len(parts) != 3:
        raise ValueError("fractions need three values: train,cal,test")
    return parts


def _parse_opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclass
class RunConfig:
    mode: str = "simulate"
    data: str | None = None
    response_col: str = "-1"
    alpha: float = 0.1
    seed: int = 0
    methods: tuple[str, ...] = tuple(m.value for m in Method)
    dispersion: str = "stddev"
    randomized: bool = True
    transform: str = "none"
    trees: int = 100
    min_samples_leaf: int = 10
    max_depth: int | None = None
    cv_grid: tuple[int, ...] = ()
    fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    trials: int = 1
    n_train: int = 100
    n_cal: int = 100
    n_test: int = 200
    n_bins: int = 20
    n_jobs: int = 1
    uacqr_s_base: str = "forest"
    figures: bool = True
    out: str = "uacqr-out"

    def method_specs(self) -> tuple[MethodSpec, ...]:
        if self.methods == ("all",):
            return tuple(MethodSpec(s.method, self.dispersion) for s in ALL_METHODS)
        return tuple(MethodSpec.parse(m, self.dispersion) for m in self.methods)

    def forest_params(self, min_samples_leaf: int | None = None, seed: int = 0) -> ForestParams:
        return ForestParams(n_trees=self.trees,
                            min_samples_leaf=min_samples_leaf or self.min_samples_leaf,
                            max_depth=self.max_depth, seed=seed)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "simulate" and self.data is not None:
            raise ConfigError("data is not used in simulate mode; drop it or pick evaluate/crossval")
        if self.mode != "simulate" and self.data is None:
            raise ConfigError(f"mode {self.mode} needs data")
        if self.mode == "crossval" and not self.cv_grid:
            raise ConfigError("crossval needs a nonempty cv_grid")
        if self.mode != "crossval" and self.cv_grid:
            raise ConfigError("cv_grid is only used in crossval mode")
        if any(g < 1 for g in self.cv_grid):
            raise ConfigError("cv_grid values must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if self.dispersion not in DISPERSIONS:
            raise ConfigError(f"dispersion must be one of {DISPERSIONS}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}")
        if self.uacqr_s_base not in UACQR_S_BASES:
            raise ConfigError(f"uacqr_s_base must be one of {UACQR_S_BASES}")
        if self.mode == "simulate" and self.transform != "none":
            raise ConfigError("transform applies to evaluate/crossval only")
        for name in ("trees", "min_samples_leaf", "trials", "n_train", "n_cal", "n_test",
                     "n_bins", "n_jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.method_specs()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


_PARSERS = {
    "mode": str, "data": lambda s: None if s.strip().lower() in ("", "none") else s,
    "response_col": str, "alpha": float, "seed": int, "methods": _parse_list,
    "dispersion": str, "randomized": _parse_bool, "transform": str, "trees": int,
    "min_samples_leaf": int, "max_depth": _parse_opt_int, "cv_grid": _parse_ints,
    "fractions": _parse_fractions, "trials": int, "n_train": int, "n_cal": int,
    "n_test": int, "n_bins": int, "n_jobs": int, "uacqr_s_base": str,
    "figures": _parse_bool, "out": str,
}
KEYS = tuple(_PARSERS)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines into typed settings."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = _normalize_key(key)
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            out[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def format_config(config: RunConfig) -> str:
    lines = ["# resolved uacqr run settings; rerun with --config this-file"]
    lines += [f"{k} = {_format(getattr(config, k))}" for k in KEYS]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uacqr", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key = value settings file; flags override it")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--data", help="CSV table (evaluate/crossval)")
    p.add_argument("--response-col", help="response column name or index (default: last)")
    p.add_argument("--alpha", help="miscoverage level (default 0.1)")
    p.add_argument("--seed")
    p.add_argument("--methods", help="comma list of methods, or 'all'")
    p.add_argument("--dispersion", choices=DISPERSIONS, help="UACQR-S dispersion")
    p.add_argument("--randomized", choices=("on", "off"), help="randomized cutoffs (default on)")
    p.add_argument("--transform", choices=TRANSFORMS)
    p.add_argument("--trees", help="forest size B")
    p.add_argument("--min-samples-leaf")
    p.add_argument("--max-depth")
    p.add_argument("--cv-grid", help="comma list of min_samples_leaf values (crossval)")
    p.add_argument("--fractions", help="train,cal,test split fractions")
    p.add_argument("--trials", help="repetitions with fresh seeds")
    p.add_argument("--n-train")
    p.add_argument("--n-cal")
    p.add_argument("--n-test")
    p.add_argument("--n-bins", help="x-bins for conditional coverage (simulate)")
    p.add_argument("--n-jobs", help="worker threads")
    p.add_argument("--uacqr-s-base", choices=UACQR_S_BASES)
    p.add_argument("--figures", choices=("on", "off"), help="render PNG figures (default on)")
    p.add_argument("--out", help=f"output directory (env {OUT_ENV} also sets it)")
    return p


def resolve_config(argv=None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    settings: dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        settings.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    if environ.get(OUT_ENV):
        settings["out"] = environ[OUT_ENV]
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            try:
                settings[key] = _PARSERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"--{key.replace('_', '-')}: {exc}") from None
    return RunConfig(**settings).validate()


# ---------------------------------------------------------------------------
# real-data pipelines


def _stream(seed: int, trial: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(trial, purpose))


def _int_seed(seed: int, trial: int, purpose: int) -> int:
    return int(_stream(seed, trial, purpose).generate_state(1)[0])


def fit_and_run(ds: Dataset, split: DataSplit, specs, params: ForestParams, alpha: float,
                randomized: bool, seed: np.random.SeedSequence,
                uacqr_s_base: str = "forest") -> list[MethodRun]:
    """Fit on the training block, calibrate on calibration, predict on test."""
    tr = ds.subset(split.train_idx)
    ca = ds.subset(split.cal_idx)
    te = ds.subset(split.test_idx)
    model = fit_forest(tr.features, tr.response, params)
    return run_forest_split(model, ca.features, ca.response, te.features, specs, alpha,
                            randomized, seed, uacqr_s_base)


def _cv_objective(bands, y, alpha) -> float:
    # an infinite band has infinite interval score
    if not (np.all(np.isfinite(bands.lower)) and np.all(np.isfinite(bands.upper))):
        return math.inf
    return evaluate_bands(bands, y, alpha).mean_isl


@dataclass
class CVResult:
    chosen: int
    scores: dict[int, float]
    rows_used: np.ndarray  # outer-dataset rows the search read


def crossval_grid(ds: Dataset, split: DataSplit, grid, specs, alpha: float, seed: int,
                  trees: int = 100, randomized: bool = True, max_depth: int | None = None,
                  uacqr_s_base: str = "forest", n_jobs: int = 1) -> dict[str, CVResult]:
    """Per-method choice of ``min_samples_leaf`` using the training block only.

    The training block is cut 40/40/20 into sub-train, sub-calibration and
    sub-test; each grid value runs the whole conformal pipeline and is scored
    by mean interval score loss on sub-test. Ties go to the smaller value.
    Grid values run on ``n_jobs`` threads; every value uses the same derived
    seeds, so the result does not depend on scheduling.
    """
    grid = [int(g) for g in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    train_idx = np.asarray(split.train_idx)
    try:
        inner = split_dataset(len(train_idx), (0.4, 0.4, 0.2), _int_seed(seed, 0, 10))
    except DataError:
        raise DataError(f"training block of {len(train_idx)} rows is too small to sub-split 40/40/20") from None
    sub = ds.subset(train_idx)
    y_test = sub.response[inner.test_idx]
    specs = [s if isinstance(s, MethodSpec) else MethodSpec.parse(s) for s in specs]

    def one(g):
        params = ForestParams(n_trees=trees, min_samples_leaf=g, max_depth=max_depth,
                              seed=_int_seed(seed, 0, 11))
        runs = fit_and_run(sub, inner, specs, params, alpha, randomized, _stream(seed, 0, 12),
                           uacqr_s_base)
        return {run.spec.name: _cv_objective(run.bands, y_test, alpha) for run in runs}

    values = sorted(set(grid))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, values))
    else:
        results = [one(g) for g in values]
    table: dict[str, dict[int, float]] = {s.name: {} for s in specs}
    for g, res in zip(values, results):
        for name, v in res.items():
            table[name][g] = v
    used = np.sort(train_idx)
    out = {}
    for name, scores in table.items():
        best = min(scores.values())
        chosen = min(g for g, v in scores.items() if v == best)
        out[name] = CVResult(chosen, dict(scores), used)
    return out


def crossval_min_samples_leaf(ds: Dataset, split: DataSplit, grid, method, alpha: float,
                              seed: int, **kwargs) -> int:
    spec = method if isinstance(method, MethodSpec) else MethodSpec.parse(method)
    return crossval_grid(ds, split, grid, [spec], alpha, seed, **kwargs)[spec.name].chosen


RESULT_COLUMNS = ("method", "trial", "coverage", "avg_width", "frac_infinite_width", "mean_isl",
                  "n_isl_excluded", "cw_correlation", "cw_degenerate", "t_hat", "chosen_t",
                  "n_floored", "min_samples_leaf", "n_train", "n_cal", "n_test")


def _result_row(run: MethodRun, y_test, alpha, trial, msl, split: DataSplit) -> dict:
    rep = evaluate_bands(run.bands, y_test, alpha)
    cut = run.calibration.randomized
    n_train, n_cal, n_test = split.sizes
    return {
        "method": run.spec.name, "trial": trial, "coverage": rep.coverage,
        "avg_width": rep.avg_width, "frac_infinite_width": rep.frac_infinite_width,
        "mean_isl": rep.mean_isl, "n_isl_excluded": rep.n_isl_excluded,
        "cw_correlation": rep.cw_correlation, "cw_degenerate": rep.cw_degenerate,
        "t_hat": run.calibration.t_hat,
        "chosen_t": cut.chosen_t if cut is not None else run.calibration.t_hat,
        "n_floored": run.calibration.n_floored, "min_samples_leaf": msl,
        "n_train": n_train, "n_cal": n_cal, "n_test": n_test,
    }


def run_real(config: RunConfig):
    """evaluate / crossval modes; returns (result rows, cv rows)."""
    ds0 = load_csv(config.data, config.response_col)
    specs = config.method_specs()
    rows, cv_rows = [], []
    for trial in range(config.trials):
        split = split_dataset(ds0.n, config.fractions, _int_seed(config.seed, trial, 0))
        ds, _ = fit_apply_transform(ds0, split, config.transform)
        y_test = ds.response[split.test_idx]
        if config.mode == "evaluate":
            params = config.forest_params(seed=_int_seed(config.seed, trial, 1))
            runs = fit_and_run(ds, split, specs, params, config.alpha, config.randomized,
                               _stream(config.seed, trial, 2), config.uacqr_s_base)
            rows += [_result_row(r, y_test, config.alpha, trial, config.min_samples_leaf, split)
                     for r in runs]
            continue
        cv = crossval_grid(ds, split, config.cv_grid, specs, config.alpha,
                           _int_seed(config.seed, trial, 3), config.trees, config.randomized,
                           config.max_depth, config.uacqr_s_base, config.n_jobs)
        for name, res in cv.items():
            cv_rows += [{"method": name, "trial": trial, "min_samples_leaf": g, "mean_isl": v,
                         "chosen": g == res.chosen} for g, v in sorted(res.scores.items())]
        # refit on the full split, grouping methods that chose the same leaf size
        by_leaf: dict[int, list[MethodSpec]] = {}
        for spec in specs:
            by_leaf.setdefault(cv[spec.name].chosen, []).append(spec)
        trial_rows = {}
        for msl, group in sorted(by_leaf.items()):
            params = config.forest_params(msl, seed=_int_seed(config.seed, trial, 1))
            for run in fit_and_run(ds, split, group, params, config.alpha, config.randomized,
                                   _stream(config.seed, trial, 2), config.uacqr_s_base):
                trial_rows[run.spec.name] = _result_row(run, y_test, config.alpha, trial, msl, split)
        rows += [trial_rows[s.name] for s in specs]
    return rows, cv_rows


# ---------------------------------------------------------------------------
# output


def _write_dicts(path: Path, columns, records) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for rec in records:
            w.writerow([_format(rec[c]) if not isinstance(rec[c], bool) else str(rec[c]).lower()
                        for c in columns])


def _summaries(rows) -> list:
    from .sim import MethodSummary, _mean_se

    out = []
    for name in dict.fromkeys(r["method"] for r in rows):
        mine = [r for r in rows if r["method"] == name]
        cov, cov_se = _mean_se([r["coverage"] for r in mine])
        wid, wid_se = _mean_se([r["avg_width"] for r in mine])
        isl, isl_se = _mean_se([r["mean_isl"] for r in mine])
        out.append(MethodSummary(
            method=name, trials=len(mine), coverage=cov, coverage_se=cov_se,
            pooled_coverage=sum(r["coverage"] * r["n_test"] for r in mine) / sum(r["n_test"] for r in mine),
            avg_width=wid, avg_width_se=wid_se, mean_isl=isl, mean_isl_se=isl_se,
            cw_correlation=_mean_se([r["cw_correlation"] for r in mine])[0],
            frac_infinite_width=_mean_se([r["frac_infinite_width"] for r in mine])[0],
        ))
    return out


def _prepare_out(config: RunConfig) -> Path:
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def run(config: RunConfig) -> dict[str, Path]:
    """Execute a validated config and write its outputs; returns the written paths."""
    from . import sim
    from .plotting import plot_bands, plot_conditional_coverage, plot_method_summary

    config.validate()
    out = _prepare_out(config)
    paths = {"config": out / "config.txt"}
    paths["config"].write_text(format_config(config), encoding="utf-8")

    if config.mode == "simulate":
        sc = sim.SimConfig(n_train=config.n_train, n_cal=config.n_cal, n_test=config.n_test,
                           trials=config.trials, alpha=config.alpha, seed=config.seed,
                           forest=config.forest_params(), methods=config.method_specs(),
                           randomized=config.randomized, n_bins=config.n_bins,
                           n_jobs=config.n_jobs, uacqr_s_base=config.uacqr_s_base)
        result = sim.run_trials(sc)
        paths.update(sim.write_sim_outputs(result, out))
        if config.figures:
            paths["coverage_figure"] = plot_conditional_coverage(result.bins, config.alpha,
                                                                 out / "conditional_coverage.png")
            x, y, runs = sim.trial_runs(sc, 0)
            paths["bands_figure"] = plot_bands(x, y, {r.spec.name: r.bands for r in runs},
                                               out / "bands_trial0.png",
                                               sim.oracle_interval(x, config.alpha))
        return paths

    rows, cv_rows = run_real(config)
    paths["results"] = out / "results.csv"
    _write_dicts(paths["results"], RESULT_COLUMNS, rows)
    summary = _summaries(rows)
    paths["summary"] = out / "summary.csv"
    sim.write_rows(paths["summary"], sim.SUMMARY_COLUMNS, summary)
    if cv_rows:
        paths["cv"] = out / "cv.csv"
        _write_dicts(paths["cv"], ("method", "trial", "min_samples_leaf", "mean_isl", "chosen"), cv_rows)
    if config.figures:
        paths["summary_figure"] = plot_method_summary(summary, out / "summary.png")
    return paths


def main(argv=None) -> int:
    try:
        config = resolve_config(argv)
        paths = run(config)
    except (ConfigError, DataError) as exc:
        print(f"uacqr: error: {exc}", file=sys.stderr)
        return 2
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
