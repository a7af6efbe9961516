"""Tabular data loading, response transforms and seeded splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input data, with the offending location in the message."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.response, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or y.ndim != 1:
            raise DataError("features must be 2-D and response 1-D")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} responses")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError("dataset needs at least one row and one feature")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains NaN or infinite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.response[idx])


@dataclass(frozen=True)
class DataSplit:
    train_idx: np.ndarray
    cal_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        blocks = [np.asarray(b, dtype=np.int64) for b in (self.train_idx, self.cal_idx, self.test_idx)]
        for name, b in zip(("train", "calibration", "test"), blocks):
            if len(b) == 0:
                raise DataError(f"{name} block is empty")
        joined = np.concatenate(blocks)
        if len(np.unique(joined)) != len(joined):
            raise DataError("split blocks overlap")
        for b in blocks:
            b.setflags(write=False)
        object.__setattr__(self, "train_idx", blocks[0])
        object.__setattr__(self, "cal_idx", blocks[1])
        object.__setattr__(self, "test_idx", blocks[2])

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_idx), len(self.cal_idx), len(self.test_idx)


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"
    fitted_scale: float | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {TRANSFORMS}")
        if self.kind == "mean_abs_normalize" and not (self.fitted_scale and self.fitted_scale > 0):
            raise ValueError("mean_abs_normalize needs a positive fitted_scale")

    def apply(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "mean_abs_normalize":
            return y / self.fitted_scale
        if self.kind == "log1p":
            return np.log1p(y)
        return y

    def invert(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "mean_abs_normalize":
            return y * self.fitted_scale
        if self.kind == "log1p":
            return np.expm1(y)
        return y


TRANSFORMS = ("none", "mean_abs_normalize", "log1p")


def _parse_float(cell: str, row: int, col: int, path) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col}: non-numeric cell {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}, column {col}: non-finite value {cell!r}")
    return v


def _looks_numeric(cells) -> bool:
    try:
        [float(c) for c in cells]
    except ValueError:
        return False
    return True


def load_csv(path, response_column: str | int = -1) -> Dataset:
    """Read a numeric CSV table; one column is the response, the rest features.

    A first row that does not parse as numbers is taken as a header. Rows are
    1-based in error messages (counting the header), columns 0-based.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty table")

    header = None
    first_line = 1
    if not _looks_numeric(rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_line = 2
    if not rows:
        raise DataError(f"{path}: empty table")

    width = len(header) if header is not None else len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i + first_line} has {len(r)} cells, expected {width}")

    if isinstance(response_column, str) and not response_column.lstrip("-").isdigit():
        if header is None or response_column not in header:
            raise DataError(f"{path}: response column {response_column!r} not found")
        col = header.index(response_column)
    else:
        col = int(response_column)
        if not -width <= col < width:
            raise DataError(f"{path}: response column {col} out of range for {width} columns")
        col %= width
    if width < 2:
        raise DataError(f"{path}: need at least one feature column besides the response")

    table = np.array([[_parse_float(c, i + first_line, j, path) for j, c in enumerate(r)]
                      for i, r in enumerate(rows)])
    return Dataset(np.delete(table, col, axis=1), table[:, col])


def split_dataset(n: int, fractions=(0.4, 0.4, 0.2), seed: int = 0) -> DataSplit:
    """Shuffle ``range(n)`` and cut train/calibration/test blocks.

    Calibration and test get ``floor(n * f)`` rows. When the fractions sum to
    one the rounding remainder goes to train; otherwise train also gets
    ``floor(n * f_train)`` and the remaining rows are left out.
    """
    f_train, f_cal, f_test = (float(f) for f in fractions)
    if min(f_train, f_cal, f_test) <= 0:
        raise DataError("split fractions must be positive")
    total = f_train + f_cal + f_test
    if total > 1 + 1e-12:
        raise DataError(f"split fractions sum to {total} > 1")
    if n < 3:
        raise DataError("need at least 3 rows to split")
    n_cal = math.floor(n * f_cal + 1e-9)
    n_test = math.floor(n * f_test + 1e-9)
    if abs(total - 1) <= 1e-12:
        n_train = n - n_cal - n_test
    else:
        n_train = math.floor(n * f_train + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    return DataSplit(perm[:n_train], perm[n_train:n_train + n_cal],
                     perm[n_train + n_cal:n_train + n_cal + n_test])


def fit_apply_transform(ds: Dataset, split: DataSplit, kind: str = "none"):
    """Fit a response transform on the training block and apply it to all rows."""
    if kind == "none":
        return ds, TransformSpec("none")
    if kind == "mean_abs_normalize":
        scale = float(np.mean(np.abs(ds.response[split.train_idx])))
        if not scale > 0:
            raise DataError("mean absolute training response is zero; cannot normalize")
        spec = TransformSpec(kind, scale)
    elif kind == "log1p":
        if np.any(ds.response <= -1):
            raise DataError("log1p needs all responses > -1")
        spec = TransformSpec(kind)
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return Dataset(ds.features, spec.apply(ds.response)), spec
