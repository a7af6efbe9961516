"""Uncertainty-aware conformalized quantile regression.

Quantile regression forests, nested split-conformal interval methods
(CQR, CQR-r, CQR-m, DCP, UACQR-S, UACQR-P and a constant-width baseline),
randomized exact-coverage calibration, evaluation metrics and a synthetic
benchmark.
"""

from .conformal import (ALL_METHODS, CalibratedModel, IntervalBand, Method, MethodSpec,
                        RandomizedCutoff, ScoreIngredients, band_at, calibrate,
                        calibrate_randomized, contains, fit_calibration, predict_interval,
                        score, scores)
from .data import DataError, Dataset, DataSplit, TransformSpec, fit_apply_transform, load_csv, split_dataset
from .ensemble import (EnsembleQuantiles, TargetQuantiles, aggregate_mean, dispersion, isotonize,
                       load_external_ensemble, order_statistic)
from .metrics import (EvaluationReport, binned_conditional_coverage, coverage,
                      coverage_width_correlation, evaluate, interval_score_loss)
from .pipeline import ensemble_ingredients, forest_ingredients, run_forest_split
from .qrf import (ForestModel, ForestParams, conditional_cdf, fit_forest, forest_weights,
                  load_forest, per_tree_quantiles, predict_mean, predict_quantile, save_forest)

__version__ = "0.1.0"
