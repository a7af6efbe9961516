"""Glue between base learners and the conformal methods.

Builds :class:`ScoreIngredients` from a fitted forest (or from an external
ensemble table) and runs calibrate-then-predict for a list of methods on one
calibration/test split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .conformal import (CalibratedModel, IntervalBand, Method, MethodSpec, ScoreIngredients,
                        fit_calibration, predict_interval)
from .ensemble import (EnsembleQuantiles, TargetQuantiles, aggregate_mean, dispersion,
                       isotonize)
from .qrf import ConditionalDistribution, ForestModel, leaf_quantiles, weighted_mean

UACQR_S_BASES = ("forest", "ensemble-mean")


def forest_ingredients(model: ForestModel, X, methods, targets: TargetQuantiles,
                       uacqr_s_base: str = "forest") -> dict[MethodSpec, ScoreIngredients]:
    """Ingredients for every requested method at the rows of X.

    Per-tree leaf quantiles serve as the B-member ensemble. With
    ``uacqr_s_base="forest"`` UACQR-S inflates the full-forest quantiles;
    ``"ensemble-mean"`` uses the mean of the per-tree quantiles instead.
    """
    if uacqr_s_base not in UACQR_S_BASES:
        raise ValueError(f"uacqr_s_base must be one of {UACQR_S_BASES}")
    methods = [MethodSpec(m) if not isinstance(m, MethodSpec) else m for m in methods]
    kinds = {s.method for s in methods}
    leaf_ids = model.apply(X)

    cond = q_lo = q_hi = q_med = mu = ens = None
    if kinds & {Method.CQR, Method.CQR_R, Method.CQR_M, Method.UACQR_S, Method.DCP}:
        cond = ConditionalDistribution.from_leaves(model, leaf_ids)
        q_lo = cond.quantile(targets.alpha_lo)
        q_hi = cond.quantile(targets.alpha_hi)
    if Method.CQR_M in kinds:
        q_med = cond.quantile(0.5)
    if Method.MEAN_ABS in kinds:
        w = _kernels.forest_weights(leaf_ids, model.idx_ptr, model.idx_member, model.idx_count,
                                    model.leaf_size, len(model.train_responses))
        mu = weighted_mean(w, model.train_responses)
    if kinds & {Method.UACQR_S, Method.UACQR_P}:
        ens = EnsembleQuantiles(leaf_quantiles(model, targets.alpha_lo)[leaf_ids],
                                leaf_quantiles(model, targets.alpha_hi)[leaf_ids])

    out = {}
    for spec in methods:
        m = spec.method
        if m is Method.MEAN_ABS:
            out[spec] = ScoreIngredients(mu=mu)
        elif m in (Method.CQR, Method.CQR_R):
            out[spec] = ScoreIngredients(q_lo=q_lo, q_hi=q_hi)
        elif m is Method.CQR_M:
            out[spec] = ScoreIngredients(q_lo=q_lo, q_hi=q_hi, q_med=q_med)
        elif m is Method.DCP:
            out[spec] = ScoreIngredients(conditional=cond)
        elif m is Method.UACQR_P:
            out[spec] = ScoreIngredients(ensemble=ens)
        else:
            g_lo, g_hi = dispersion(ens, spec.dispersion)
            base_lo, base_hi = (q_lo, q_hi) if uacqr_s_base == "forest" else aggregate_mean(ens)
            out[spec] = ScoreIngredients(q_lo=base_lo, q_hi=base_hi, g_lo=g_lo, g_hi=g_hi,
                                         ensemble=ens)
    return out


EXTERNAL_METHODS = (Method.CQR, Method.CQR_R, Method.UACQR_S, Method.UACQR_P)


def ensemble_ingredients(table: dict[str, EnsembleQuantiles], point_ids, methods,
                         aggregate: str = "mean", isotonic: bool = False
                         ) -> dict[MethodSpec, ScoreIngredients]:
    """Ingredients from an externally produced ensemble (e.g. per-epoch outputs).

    ``aggregate`` picks the base quantiles: the member mean, or the last
    member (the fully trained model for epoch ensembles).
    """
    if aggregate not in ("mean", "last"):
        raise ValueError("aggregate must be 'mean' or 'last'")
    try:
        members = [table[str(p)] for p in point_ids]
    except KeyError as exc:
        raise KeyError(f"point {exc.args[0]!r} not in the ensemble table") from None
    ens = EnsembleQuantiles(np.stack([e.lo for e in members]), np.stack([e.hi for e in members]))
    if aggregate == "mean":
        q_lo, q_hi = aggregate_mean(ens)
    else:
        q_lo, q_hi = ens.lo[:, -1].copy(), ens.hi[:, -1].copy()
    if isotonic:
        q_lo, q_hi = isotonize(q_lo, q_hi)
    out = {}
    for spec in methods:
        spec = spec if isinstance(spec, MethodSpec) else MethodSpec(spec)
        if spec.method not in EXTERNAL_METHODS:
            raise ValueError(f"{spec.name} cannot be run from an external ensemble")
        if spec.method is Method.UACQR_P:
            out[spec] = ScoreIngredients(ensemble=ens)
        elif spec.method is Method.UACQR_S:
            g_lo, g_hi = dispersion(ens, spec.dispersion)
            out[spec] = ScoreIngredients(q_lo=q_lo, q_hi=q_hi, g_lo=g_lo, g_hi=g_hi, ensemble=ens)
        else:
            out[spec] = ScoreIngredients(q_lo=q_lo, q_hi=q_hi)
    return out


@dataclass
class MethodRun:
    spec: MethodSpec
    calibration: CalibratedModel
    bands: IntervalBand


def method_rng(seed: np.random.SeedSequence, i: int) -> np.random.Generator:
    """Independent stream for the i-th method under a parent seed sequence."""
    return np.random.default_rng(np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key + (i,)))


def calibrate_and_predict(cal_ing: dict, y_cal, test_ing: dict, alpha: float,
                          randomized: bool, seed: np.random.SeedSequence) -> list[MethodRun]:
    runs = []
    for i, spec in enumerate(cal_ing):
        rng = method_rng(seed, i) if randomized else None
        cal = fit_calibration(spec, cal_ing[spec], y_cal, alpha, rng)
        runs.append(MethodRun(spec, cal, predict_interval(spec, test_ing[spec], cal)))
    return runs


def run_forest_split(model: ForestModel, X_cal, y_cal, X_test, methods, alpha: float,
                     randomized: bool, seed: np.random.SeedSequence,
                     uacqr_s_base: str = "forest") -> list[MethodRun]:
    targets = TargetQuantiles.central(alpha)
    cal_ing = forest_ingredients(model, X_cal, methods, targets, uacqr_s_base)
    test_ing = forest_ingredients(model, X_test, methods, targets, uacqr_s_base)
    return calibrate_and_predict(cal_ing, y_cal, test_ing, alpha, randomized, seed)
