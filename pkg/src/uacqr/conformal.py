"""Nested split-conformal calibration for quantile-based interval methods.

Every method defines a nested family of bands ``C_t(x) = [lo(x, t), hi(x, t)]``
that widens with ``t``. A calibration point's score is the smallest ``t``
whose closed band contains its response, and the calibrated threshold is the
``ceil((1 - alpha)(n_cal + 1))``-th smallest score.

Scores are computed as the smallest float ``t`` for which the band
endpoints, evaluated exactly as :func:`predict_interval` evaluates them,
contain ``y``. So ``contains(band(t), y) == (score(y) <= t)`` holds bit for
bit, not just up to rounding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import DISPERSIONS, EnsembleQuantiles

#: Replacement for non-positive scaling factors.
SCALE_FLOOR = 1e-8


class Method(str, enum.Enum):
    MEAN_ABS = "mean-abs"
    CQR = "cqr"
    CQR_R = "cqr-r"
    CQR_M = "cqr-m"
    DCP = "dcp"
    UACQR_S = "uacqr-s"
    UACQR_P = "uacqr-p"


LINEAR_METHODS = (Method.MEAN_ABS, Method.CQR, Method.CQR_R, Method.CQR_M, Method.UACQR_S)


@dataclass(frozen=True)
class MethodSpec:
    method: Method
    dispersion: str = "stddev"

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.dispersion not in DISPERSIONS:
            raise ValueError(f"unknown dispersion {self.dispersion!r}")

    @property
    def name(self) -> str:
        if self.method is Method.UACQR_S and self.dispersion != "stddev":
            return f"{self.method.value}-{self.dispersion}"
        return self.method.value

    @classmethod
    def parse(cls, text: str, dispersion: str = "stddev") -> "MethodSpec":
        text = text.strip().lower().replace("_", "-")
        if text == "uacqr-s-iqr":
            return cls(Method.UACQR_S, "iqr")
        if text == "uacqr-s-stddev":
            return cls(Method.UACQR_S, "stddev")
        try:
            return cls(Method(text), dispersion)
        except ValueError:
            choices = ", ".join(m.value for m in Method)
            raise ValueError(f"unknown method {text!r}; expected one of {choices}") from None


ALL_METHODS = tuple(MethodSpec(m) for m in Method)


@dataclass
class ScoreIngredients:
    """Per-point model outputs a method needs, for a batch of points.

    ``conditional`` is any object with ``quantile(a, rows=None)`` (extended
    left-continuous quantile) and ``cdf_at(y, strict=False)``; the forest's
    :class:`~uacqr.qrf.ConditionalDistribution` is the usual one.
    """

    q_lo: np.ndarray | None = None
    q_hi: np.ndarray | None = None
    q_med: np.ndarray | None = None
    mu: np.ndarray | None = None
    g_lo: np.ndarray | None = None
    g_hi: np.ndarray | None = None
    ensemble: EnsembleQuantiles | None = None
    conditional: object | None = None

    def __len__(self):
        for v in (self.q_lo, self.mu, self.g_lo):
            if v is not None:
                return len(v)
        if self.ensemble is not None:
            return self.ensemble.lo.shape[0]
        if self.conditional is not None:
            return len(self.conditional)
        return 0


_REQUIRED = {
    Method.MEAN_ABS: ("mu",),
    Method.CQR: ("q_lo", "q_hi"),
    Method.CQR_R: ("q_lo", "q_hi"),
    Method.CQR_M: ("q_lo", "q_hi", "q_med"),
    Method.UACQR_S: ("q_lo", "q_hi", "g_lo", "g_hi"),
    Method.UACQR_P: ("ensemble",),
    Method.DCP: ("conditional",),
}


def _check(spec: MethodSpec, ing: ScoreIngredients):
    missing = [f for f in _REQUIRED[spec.method] if getattr(ing, f) is None]
    if missing:
        raise ValueError(f"{spec.name} needs ingredients {missing}")
    for f in _REQUIRED[spec.method]:
        v = getattr(ing, f)
        if isinstance(v, np.ndarray) and not np.all(np.isfinite(v)):
            raise ValueError(f"ingredient {f} has non-finite entries")


def _linear_parts(spec: MethodSpec, ing: ScoreIngredients):
    """(base_lo, base_hi, scale_lo, scale_hi, n_floored) for linear methods."""
    m = spec.method
    if m is Method.MEAN_ABS:
        mu = np.asarray(ing.mu, dtype=float)
        one = np.ones_like(mu)
        return mu, mu, one, one, 0
    q_lo = np.asarray(ing.q_lo, dtype=float)
    q_hi = np.asarray(ing.q_hi, dtype=float)
    if m is Method.CQR:
        one = np.ones_like(q_lo)
        return q_lo, q_hi, one, one, 0
    if m is Method.CQR_R:
        s_lo = s_hi = q_hi - q_lo
    elif m is Method.CQR_M:
        q_med = np.asarray(ing.q_med, dtype=float)
        s_lo, s_hi = q_med - q_lo, q_hi - q_med
    else:
        s_lo, s_hi = np.asarray(ing.g_lo, dtype=float), np.asarray(ing.g_hi, dtype=float)
    n_floored = int(np.sum(s_lo <= 0) + np.sum(s_hi <= 0))
    s_lo = np.where(s_lo > 0, s_lo, SCALE_FLOOR)
    s_hi = np.where(s_hi > 0, s_hi, SCALE_FLOOR)
    return q_lo, q_hi, s_lo, s_hi, n_floored


def floored_count(spec: MethodSpec, ing: ScoreIngredients) -> int:
    """How many scaling factors were replaced by the floor."""
    if spec.method not in LINEAR_METHODS:
        return 0
    _check(spec, ing)
    return _linear_parts(spec, ing)[4]


# ---------------------------------------------------------------------------
# exact float search


def _key(f: np.ndarray) -> np.ndarray:
    """Order-preserving map from finite floats to int64."""
    i = np.ascontiguousarray(f, dtype=np.float64).view(np.int64)
    return np.where(i < 0, -(i & 0x7FFFFFFFFFFFFFFF), i)


def _unkey(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    bits = np.where(k < 0, (-k) | np.int64(-0x8000000000000000), k)
    return bits.view(np.float64)


def _least_true(pred, t0) -> np.ndarray:
    """Smallest float t with ``pred(t, rows)`` true, per row.

    ``pred`` must be monotone in t (false below a threshold, true above),
    true as t -> +inf and false as t -> -inf. ``t0`` is a close estimate.
    """
    t = np.array(t0, dtype=float)
    rows = np.arange(len(t))
    ok = pred(t, rows)
    ok_prev = pred(np.nextafter(t, -np.inf), rows)
    todo = np.flatnonzero(~ok | ok_prev)
    if todo.size == 0:
        return t

    hi = t[todo].copy()
    lo = t[todo].copy()
    hi_ok = ok[todo].copy()
    lo_bad = ~ok[todo]
    step = np.maximum(np.abs(t[todo]) * 2.0 ** -40, 1e-300)
    while not hi_ok.all():
        need = np.flatnonzero(~hi_ok)
        hi[need] = hi[need] + step[need]
        step[need] *= 2
        hi_ok[need] = pred(hi[need], todo[need])
    step = np.maximum(np.abs(t[todo]) * 2.0 ** -40, 1e-300)
    while not lo_bad.all():
        need = np.flatnonzero(~lo_bad)
        lo[need] = lo[need] - step[need]
        step[need] *= 2
        lo_bad[need] = ~pred(lo[need], todo[need])

    klo, khi = _key(lo), _key(hi)
    while True:
        open_ = np.flatnonzero(khi - klo > 1)
        if open_.size == 0:
            break
        mid = klo[open_] + (khi[open_] - klo[open_]) // 2
        good = pred(_unkey(mid), todo[open_])
        khi[open_] = np.where(good, mid, khi[open_])
        klo[open_] = np.where(good, klo[open_], mid)
    t[todo] = _unkey(khi)
    return t


# ---------------------------------------------------------------------------
# bands


@dataclass
class IntervalBand:
    """Prediction bands for a batch of points (or one point, with scalars)."""

    lower: np.ndarray
    upper: np.ndarray
    lower_open: bool = False
    upper_open: bool = False

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    def __len__(self):
        return self.lower.size

    @property
    def is_empty(self) -> np.ndarray:
        touching_open = (self.lower == self.upper) & (self.lower_open or self.upper_open)
        return (self.lower > self.upper) | touching_open

    @property
    def width(self) -> np.ndarray:
        return np.where(self.is_empty, 0.0, self.upper - self.lower)

    def __getitem__(self, idx) -> "IntervalBand":
        return IntervalBand(self.lower[idx], self.upper[idx], self.lower_open, self.upper_open)


def contains(band: IntervalBand, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    lo_ok = y > band.lower if band.lower_open else y >= band.lower
    hi_ok = y < band.upper if band.upper_open else y <= band.upper
    return lo_ok & hi_ok


def _dcp_levels(t):
    t = np.asarray(t, dtype=float)
    return (1 - t) / 2, (1 + t) / 2


def _uacqr_p_endpoints(e: EnsembleQuantiles, t):
    B = e.B
    lo_sorted = np.sort(e.lo, axis=-1)
    hi_sorted = np.sort(e.hi, axis=-1)
    pad_lo = np.concatenate([np.full((len(lo_sorted), 1), -np.inf), lo_sorted,
                             np.full((len(lo_sorted), 1), np.inf)], axis=1)
    pad_hi = np.concatenate([np.full((len(hi_sorted), 1), -np.inf), hi_sorted,
                             np.full((len(hi_sorted), 1), np.inf)], axis=1)
    ti = np.clip(np.floor(np.broadcast_to(np.asarray(t, dtype=float), (len(lo_sorted),))), -1, B + 1)
    ti = np.where(ti < 0, 0, ti).astype(np.int64)
    rows = np.arange(len(lo_sorted))
    return pad_lo[rows, B + 1 - ti], pad_hi[rows, ti]


def band_at(spec: MethodSpec, ing: ScoreIngredients, t) -> IntervalBand:
    """Closed band of the nested family at threshold ``t`` (scalar or per point)."""
    _check(spec, ing)
    n = len(ing)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    m = spec.method
    if m in LINEAR_METHODS:
        b_lo, b_hi, s_lo, s_hi, _ = _linear_parts(spec, ing)
        with np.errstate(invalid="ignore"):
            return IntervalBand(b_lo - t * s_lo, b_hi + t * s_hi)
    if m is Method.DCP:
        a_lo, a_hi = _dcp_levels(t)
        return IntervalBand(ing.conditional.quantile(a_lo), ing.conditional.quantile(a_hi))
    return IntervalBand(*_uacqr_p_endpoints(ing.ensemble, t))


def scores(spec: MethodSpec, ing: ScoreIngredients, y) -> np.ndarray:
    """Smallest t whose closed band contains y, per point."""
    _check(spec, ing)
    y = np.asarray(y, dtype=float)
    if y.shape != (len(ing),):
        raise ValueError(f"expected {len(ing)} responses, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("responses must be finite")
    m = spec.method

    if m is Method.UACQR_P:
        e = ing.ensemble
        n_lo_le = np.sum(e.lo <= y[:, None], axis=1)
        n_hi_lt = np.sum(e.hi < y[:, None], axis=1)
        return np.maximum(e.B + 1 - n_lo_le, n_hi_lt + 1).astype(float)

    if m is Method.DCP:
        cond = ing.conditional
        t_lo0 = 1 - 2 * cond.cdf_at(y)
        t_hi0 = 2 * cond.cdf_at(y, strict=True) - 1

        def lo_ok(t, rows):
            return cond.quantile((1 - t) / 2, rows=rows) <= y[rows]

        def hi_ok(t, rows):
            return cond.quantile((1 + t) / 2, rows=rows) >= y[rows]
    else:
        b_lo, b_hi, s_lo, s_hi, _ = _linear_parts(spec, ing)
        t_lo0 = (b_lo - y) / s_lo
        t_hi0 = (y - b_hi) / s_hi

        def lo_ok(t, rows):
            return b_lo[rows] - t * s_lo[rows] <= y[rows]

        def hi_ok(t, rows):
            return b_hi[rows] + t * s_hi[rows] >= y[rows]

    return np.maximum(_least_true(lo_ok, t_lo0), _least_true(hi_ok, t_hi0))


def score(spec: MethodSpec, ing: ScoreIngredients, y: float) -> float:
    """Single-point convenience wrapper around :func:`scores`."""
    return float(scores(spec, ing, np.array([y], dtype=float))[0])


# ---------------------------------------------------------------------------
# calibration


def conformal_rank(n_cal: int, alpha: float) -> tuple[int, float]:
    """``k = ceil((1 - alpha)(n_cal + 1))`` and the rounding gap ``k - (1 - alpha)(n_cal + 1)``."""
    if n_cal < 1:
        raise ValueError("need at least one calibration score")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    x = (1 - alpha) * (n_cal + 1)
    k = math.ceil(x - 1e-9)
    delta = min(max(k - x, 0.0), math.nextafter(1.0, 0.0))
    return k, delta


def calibrate(scores, alpha: float) -> float:
    """k-th smallest calibration score, or +inf when k exceeds their number."""
    s = np.sort(np.asarray(scores, dtype=float))
    if s.size == 0:
        raise ValueError("need at least one calibration score")
    k, _ = conformal_rank(len(s), alpha)
    return float(s[k - 1]) if k <= len(s) else math.inf


@dataclass(frozen=True)
class Branch:
    t: float
    open: bool
    probability: float


@dataclass(frozen=True)
class RandomizedCutoff:
    k: int
    delta: float
    T0: int
    T1: int
    branches: tuple[Branch, ...]
    chosen: int

    @property
    def chosen_t(self) -> float:
        return self.branches[self.chosen].t

    @property
    def lower_open(self) -> bool:
        return self.branches[self.chosen].open

    upper_open = lower_open


def randomized_branches(scores, alpha: float):
    """Branch table of the randomized cutoff: ``(k, delta, T0, T1, branches)``.

    Order statistics are extended with ``t_(0) = -inf`` and
    ``t_(n+1) = +inf``. When ``t_(k-1) < t_(k)`` there are four branches
    (open/closed at each of the two); on a tie there are two, at ``t_(k)``.
    """
    s = np.sort(np.asarray(scores, dtype=float))
    n = len(s)
    k, delta = conformal_rank(n, alpha)
    ext = np.concatenate([[-math.inf], s, [math.inf]])  # ext[i] = t_(i)
    t_km1, t_k = float(ext[k - 1]), float(ext[k])
    T0 = int(np.sum(s[:k - 1] == t_km1)) if k >= 2 else 0
    T1 = 1 if k == n + 1 else int(np.sum(s[k - 1:] == t_k))
    if t_km1 < t_k:
        branches = (
            Branch(t_km1, True, delta / (T0 + 1)),
            Branch(t_km1, False, delta * T0 / (T0 + 1)),
            Branch(t_k, True, (1 - delta) * T1 / (T1 + 1)),
            Branch(t_k, False, (1 - delta) / (T1 + 1)),
        )
    else:
        total = T0 + T1 + 1
        branches = (
            Branch(t_k, True, (T1 + delta) / total),
            Branch(t_k, False, (T0 + 1 - delta) / total),
        )
    return k, delta, T0, T1, branches


def calibrate_randomized(scores, alpha: float, rng: np.random.Generator) -> RandomizedCutoff:
    """Draw one randomized cutoff; consumes exactly one uniform from ``rng``."""
    k, delta, T0, T1, branches = randomized_branches(scores, alpha)
    u = rng.random()
    cum = np.cumsum([b.probability for b in branches])
    chosen = int(min(np.searchsorted(cum, u, side="right"), len(branches) - 1))
    # never land on a zero-probability branch through rounding
    while branches[chosen].probability == 0:
        chosen = (chosen + 1) % len(branches)
    return RandomizedCutoff(k, delta, T0, T1, branches, chosen)


@dataclass
class CalibratedModel:
    spec: MethodSpec
    t_hat: float
    alpha: float
    n_cal: int
    randomized: RandomizedCutoff | None = None
    n_floored: int = 0
    extra: dict = field(default_factory=dict)


def fit_calibration(spec: MethodSpec, ing: ScoreIngredients, y, alpha: float,
                    rng: np.random.Generator | None = None) -> CalibratedModel:
    """Score the calibration points and pick the threshold.

    With ``rng`` the randomized cutoff is drawn; without, the deterministic
    threshold is used.
    """
    s = scores(spec, ing, y)
    t_hat = calibrate(s, alpha)
    if spec.method is Method.UACQR_P:
        t_hat = min(t_hat, float(ing.ensemble.B + 1))
    cut = calibrate_randomized(s, alpha, rng) if rng is not None else None
    return CalibratedModel(spec, t_hat, alpha, len(s), cut, floored_count(spec, ing))


def predict_interval(spec: MethodSpec, ing: ScoreIngredients, cal: CalibratedModel) -> IntervalBand:
    """Prediction bands at the calibrated threshold.

    An open randomized branch at ``t`` stands for ``{y : score(y) < t}``.
    It is realized as the closed band at the preceding threshold (previous
    float, or ``t - 1`` for the integer UACQR-P scores), which by duality is
    exactly that set. A literal open interval at ``t`` can differ from it
    when rounding maps neighbouring thresholds to the same endpoint.
    """
    if cal.spec != spec:
        raise ValueError(f"calibration was fitted for {cal.spec.name}, not {spec.name}")
    _check(spec, ing)
    if cal.randomized is None:
        return band_at(spec, ing, cal.t_hat)
    t = cal.randomized.chosen_t
    if not cal.randomized.lower_open or math.isinf(t):
        return band_at(spec, ing, t)
    if spec.method is Method.UACQR_P:
        return band_at(spec, ing, t - 1)
    return band_at(spec, ing, np.nextafter(t, -np.inf))
