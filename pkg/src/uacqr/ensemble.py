"""Ensembles of B lower/upper quantile estimates per point.

Arrays are shaped ``(n_points, B)``; single-point inputs of shape ``(B,)``
are accepted everywhere and give scalar-shaped outputs.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DISPERSIONS = ("stddev", "iqr")


@dataclass(frozen=True)
class TargetQuantiles:
    alpha_lo: float
    alpha_hi: float

    def __post_init__(self):
        if not 0 < self.alpha_lo < self.alpha_hi < 1:
            raise ValueError("need 0 < alpha_lo < alpha_hi < 1")

    @classmethod
    def central(cls, alpha: float) -> "TargetQuantiles":
        return cls(alpha / 2, 1 - alpha / 2)


@dataclass(frozen=True)
class EnsembleQuantiles:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim not in (1, 2) or lo.shape[-1] < 1:
            raise ValueError("lo and hi must have the same shape (..., B) with B >= 1")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("ensemble members must be finite")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def B(self) -> int:
        return self.lo.shape[-1]

    def side(self, side: str) -> np.ndarray:
        if side == "lo":
            return self.lo
        if side == "hi":
            return self.hi
        raise ValueError(f"side must be 'lo' or 'hi', got {side!r}")


def aggregate_mean(e: EnsembleQuantiles):
    return e.lo.mean(axis=-1), e.hi.mean(axis=-1)


def empirical_quantile(values, a: float) -> np.ndarray:
    """Left-continuous a-quantile of equally weighted values along the last axis."""
    v = np.sort(np.asarray(values, dtype=float), axis=-1)
    B = v.shape[-1]
    cdf = np.arange(1, B + 1) / B
    i = min(int(np.searchsorted(cdf, a, side="left")), B - 1)
    return v[..., i]


def _spread(values, kind: str) -> np.ndarray:
    if kind == "stddev":
        # population form, 1/B. Shift and scale first so a constant side gives
        # exactly 0 and nearly equal members do not underflow to 0.
        d = values - values[..., :1]
        s = np.max(np.abs(d), axis=-1, keepdims=True)
        u = np.divide(d, s, out=np.zeros_like(d), where=s > 0)
        sd = np.sqrt(np.mean((u - u.mean(axis=-1, keepdims=True)) ** 2, axis=-1))
        return sd * s[..., 0]
    if kind == "iqr":
        return empirical_quantile(values, 0.75) - empirical_quantile(values, 0.25)
    raise ValueError(f"unknown dispersion {kind!r}; expected one of {DISPERSIONS}")


def dispersion(e: EnsembleQuantiles, kind: str = "stddev"):
    return _spread(e.lo, kind), _spread(e.hi, kind)


def order_statistic(e: EnsembleQuantiles, side: str, b: int) -> np.ndarray | float:
    """b-th smallest member of one side, with -inf at b=0 and +inf at b=B+1."""
    values = e.side(side)
    B = e.B
    if not 0 <= b <= B + 1:
        raise ValueError(f"order statistic index {b} outside [0, {B + 1}]")
    if b == 0:
        return np.full(values.shape[:-1], -np.inf) if values.ndim > 1 else -math.inf
    if b == B + 1:
        return np.full(values.shape[:-1], np.inf) if values.ndim > 1 else math.inf
    return np.sort(values, axis=-1)[..., b - 1]


def isotonize(q_lo, q_hi):
    """Replace crossed quantile pairs by their midpoint."""
    q_lo = np.asarray(q_lo, dtype=float)
    q_hi = np.asarray(q_hi, dtype=float)
    crossed = q_lo > q_hi
    mid = (q_lo + q_hi) / 2
    return np.where(crossed, mid, q_lo), np.where(crossed, mid, q_hi)


class EnsembleFormatError(ValueError):
    pass


def load_external_ensemble(path) -> dict[str, EnsembleQuantiles]:
    """Read a long-format ensemble CSV (``point_id,member_id,side,value``).

    Each point must have the same member ids for both sides. Members are
    ordered by member id (numerically when all ids are integers), so the last
    member is the latest epoch for per-epoch dumps.
    """
    path = Path(path)
    if not path.exists():
        raise EnsembleFormatError(f"{path}: no such file")
    cells: dict[str, dict[tuple[str, str], float]] = defaultdict(dict)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"point_id", "member_id", "side", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise EnsembleFormatError(f"{path}: header must contain {sorted(need)}")
        for line, row in enumerate(reader, start=2):
            side = row["side"].strip()
            if side not in ("lo", "hi"):
                raise EnsembleFormatError(f"{path}: line {line}: side must be lo or hi, got {side!r}")
            try:
                value = float(row["value"])
            except ValueError:
                raise EnsembleFormatError(f"{path}: line {line}: non-numeric value {row['value']!r}") from None
            if not math.isfinite(value):
                raise EnsembleFormatError(f"{path}: line {line}: non-finite value")
            key = (row["member_id"].strip(), side)
            pid = row["point_id"].strip()
            if key in cells[pid]:
                raise EnsembleFormatError(f"{path}: line {line}: duplicate entry for point {pid}, member {key[0]}, side {side}")
            cells[pid][key] = value
    if not cells:
        raise EnsembleFormatError(f"{path}: no rows")

    def member_order(ids):
        try:
            return sorted(ids, key=int)
        except ValueError:
            return sorted(ids)

    table = {}
    B = None
    for pid, grid in cells.items():
        members = member_order({m for m, _ in grid})
        for m in members:
            for side in ("lo", "hi"):
                if (m, side) not in grid:
                    raise EnsembleFormatError(f"{path}: point {pid} is missing member {m}, side {side}")
        if B is None:
            B = len(members)
        elif len(members) != B:
            raise EnsembleFormatError(f"{path}: point {pid} has {len(members)} members, expected {B}")
        table[pid] = EnsembleQuantiles(np.array([grid[(m, "lo")] for m in members]),
                                       np.array([grid[(m, "hi")] for m in members]))
    return table
