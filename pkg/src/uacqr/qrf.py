"""Quantile regression forest.

Trees are grown on bootstrap resamples by greedy variance reduction. Each
leaf keeps the multiset of training indices that reached it, so the forest
can answer weighted quantile, per-tree quantile, conditional CDF and mean
queries from the stored training responses.

All quantiles use the left-continuous convention
``q(a) = min{y : F(y) >= a}``, extended with ``q(a) = -inf`` for ``a <= 0``
and ``q(a) = +inf`` for ``a > 1``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

FORMAT_NAME = "uacqr-forest"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    min_samples_leaf: int = 1
    max_depth: int | None = None
    mtry: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")


@dataclass(eq=False)
class ForestModel:
    """Fitted forest. Node arrays are concatenated over trees; child and
    root ids are global. Leaf membership is CSR over global node ids."""

    params: ForestParams
    n_features: int
    train_responses: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    roots: np.ndarray
    idx_ptr: np.ndarray
    idx_member: np.ndarray
    idx_count: np.ndarray
    # derived from the above in __post_init__
    leaf_size: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    val_ptr: np.ndarray = field(init=False, repr=False)
    val_id: np.ndarray = field(init=False, repr=False)
    val_count: np.ndarray = field(init=False, repr=False)
    val_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.train_responses, dtype=float)
        self.train_responses = y
        n_nodes = self.feature.shape[0]
        counts = np.diff(self.idx_ptr)
        owner = np.repeat(np.arange(n_nodes), counts)
        self.leaf_size = np.bincount(owner, weights=self.idx_count,
                                     minlength=n_nodes).astype(np.int64)

        # distinct values of the responses, and per-leaf value multisets
        self.values, vid_of_index = np.unique(y, return_inverse=True)
        vid = vid_of_index[self.idx_member]
        key = owner * len(self.values) + vid
        ukey, inv = np.unique(key, return_inverse=True)
        self.val_count = np.bincount(inv, weights=self.idx_count).astype(np.int64)
        val_owner = ukey // len(self.values)
        self.val_id = (ukey % len(self.values)).astype(np.int64)
        self.val_ptr = np.zeros(n_nodes + 1, np.int64)
        np.cumsum(np.bincount(val_owner, minlength=n_nodes), out=self.val_ptr[1:])
        self.val_cdf = _kernels.leaf_cdf(self.val_ptr, self.val_count,
                                         self.leaf_size, self.feature < 0)

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def with_responses(self, responses) -> "ForestModel":
        """Same tree partitions and leaf memberships, new stored responses."""
        responses = np.asarray(responses, dtype=float)
        if responses.shape != self.train_responses.shape:
            raise ValueError("response vector length must match the training set")
        return ForestModel(self.params, self.n_features, responses, self.feature,
                           self.threshold, self.left, self.right, self.roots,
                           self.idx_ptr, self.idx_member, self.idx_count)

    def tree(self, b: int) -> "ForestModel":
        """The b-th tree as a one-tree forest."""
        lo = self.roots[b]
        hi = self.roots[b + 1] if b + 1 < self.n_trees else len(self.feature)
        shift = lambda a: np.where(a >= 0, a - lo, a)
        idx_ptr = self.idx_ptr[lo:hi + 1] - self.idx_ptr[lo]
        sl = slice(self.idx_ptr[lo], self.idx_ptr[hi])
        params = ForestParams(**{**asdict(self.params), "n_trees": 1})
        return ForestModel(params, self.n_features, self.train_responses,
                           self.feature[lo:hi], self.threshold[lo:hi],
                           shift(self.left[lo:hi]), shift(self.right[lo:hi]),
                           np.array([0]), idx_ptr, self.idx_member[sl],
                           self.idx_count[sl])

    def leaves(self, b: int) -> dict[int, list[tuple[int, int]]]:
        """Leaf id (tree-local) -> [(training index, multiplicity), ...]."""
        lo = self.roots[b]
        hi = self.roots[b + 1] if b + 1 < self.n_trees else len(self.feature)
        out = {}
        for node in range(lo, hi):
            if self.feature[node] < 0:
                a, z = self.idx_ptr[node], self.idx_ptr[node + 1]
                out[node - lo] = list(zip(self.idx_member[a:z].tolist(),
                                          self.idx_count[a:z].tolist()))
        return out

    def apply(self, X) -> np.ndarray:
        """Global leaf ids, shape (n_points, n_trees)."""
        X = _as_queries(X, self.n_features)
        return _kernels.apply_trees(X, self.feature, self.threshold, self.left,
                                    self.right, self.roots)

    def conditional(self, X) -> "ConditionalDistribution":
        return ConditionalDistribution.from_leaves(self, self.apply(X))


def _as_queries(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if p > 1 or X.shape[0] == 1 else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"expected {p} feature columns, got shape {X.shape}")
    return np.ascontiguousarray(X)


def _tree_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _fit_one(X, y, params: ForestParams, mtry: int, b: int):
    n, p = X.shape
    rng = _tree_rng(params.seed, b)
    if params.bootstrap:
        sample = rng.integers(0, n, size=n)
    else:
        sample = np.arange(n)
    if mtry < p:
        noise = rng.random((2 * n + 1, p))
    else:
        noise = np.zeros((1, p))
    max_depth = -1 if params.max_depth is None else params.max_depth
    feat, thr, lft, rgt, start, end, order, n_nodes = _kernels.grow_tree(
        X, y, sample.astype(np.int64), params.min_samples_leaf, max_depth, mtry, noise)

    ptr, members, counts = _kernels.leaf_members(feat, start, end, order)
    return feat, thr, lft, rgt, ptr, members, counts


def fit_forest(X, y, params: ForestParams | None = None, n_jobs: int = 1) -> ForestModel:
    """Fit a quantile regression forest.

    Each tree uses its own random stream derived from ``(params.seed, b)``,
    so the result does not depend on ``n_jobs``.
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("cannot fit a forest on empty input")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    p = X.shape[1]
    mtry = p if params.mtry is None else params.mtry
    if mtry > p:
        raise ValueError(f"mtry={mtry} exceeds the number of features {p}")

    def job(b):
        return _fit_one(X, y, params, mtry, b)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            grown = list(pool.map(job, range(params.n_trees)))
    else:
        grown = [job(b) for b in range(params.n_trees)]

    feats, thrs, lfts, rgts, roots = [], [], [], [], []
    ptrs, members, counts = [np.zeros(1, np.int64)], [], []
    offset = 0
    n_entries = 0
    for feat, thr, lft, rgt, ptr, mem, cnt in grown:
        roots.append(offset)
        feats.append(feat)
        thrs.append(thr)
        lfts.append(np.where(lft >= 0, lft + offset, -1))
        rgts.append(np.where(rgt >= 0, rgt + offset, -1))
        ptrs.append(ptr[1:] + n_entries)
        members.append(mem)
        counts.append(cnt)
        offset += len(feat)
        n_entries += len(mem)
    idx_ptr = np.concatenate(ptrs)
    return ForestModel(params, p, y.copy(), np.concatenate(feats), np.concatenate(thrs),
                       np.concatenate(lfts), np.concatenate(rgts), np.array(roots, np.int64),
                       idx_ptr, np.concatenate(members), np.concatenate(counts))


@dataclass
class ConditionalDistribution:
    """Weighted empirical distributions of Y given X for a batch of points.

    ``cdf[ptr[j]:ptr[j+1]]`` holds F(v | x_j) at the distinct support values
    ``support[ptr[j]:ptr[j+1]]`` (ascending, positive weight only). The last
    entry of every row is exactly 1.
    """

    ptr: np.ndarray
    support: np.ndarray
    cdf: np.ndarray

    @classmethod
    def from_leaves(cls, model: ForestModel, leaf_ids: np.ndarray) -> "ConditionalDistribution":
        ptr, ids, cdf = _kernels.forest_cdf(leaf_ids, model.val_ptr, model.val_id,
                                            model.val_count, model.leaf_size,
                                            len(model.values))
        return cls(ptr, model.values[ids], cdf)

    def __len__(self):
        return len(self.ptr) - 1

    def _row(self, j):
        a, z = self.ptr[j], self.ptr[j + 1]
        return self.support[a:z], self.cdf[a:z]

    def quantile(self, a, rows=None) -> np.ndarray:
        """Extended left-continuous quantile at level ``a`` (scalar or one
        per row), optionally for a subset of rows."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        a = np.broadcast_to(np.asarray(a, dtype=float), rows.shape)
        out = np.empty(rows.shape)
        for i, j in enumerate(rows):
            if a[i] <= 0.0:
                out[i] = -np.inf
            elif a[i] > 1.0:
                out[i] = np.inf
            else:
                v, c = self._row(j)
                out[i] = v[np.searchsorted(c, a[i], side="left")]
        return out

    def cdf_at(self, y, strict: bool = False, rows=None) -> np.ndarray:
        """F(y | x); with ``strict`` the mass strictly below y."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        y = np.broadcast_to(np.asarray(y, dtype=float), rows.shape)
        out = np.empty(rows.shape)
        side = "left" if strict else "right"
        for i, j in enumerate(rows):
            v, c = self._row(j)
            k = np.searchsorted(v, y[i], side=side)
            out[i] = c[k - 1] if k > 0 else 0.0
        return out


def forest_weights(model: ForestModel, X) -> np.ndarray:
    """Leaf-induced training weights, shape (n_points, n_train)."""
    leaf_ids = model.apply(X)
    return _kernels.forest_weights(leaf_ids, model.idx_ptr, model.idx_member,
                                   model.idx_count, model.leaf_size,
                                   len(model.train_responses))


def predict_quantile(model: ForestModel, X, a) -> np.ndarray:
    return model.conditional(X).quantile(a)


def conditional_cdf(model: ForestModel, X, y) -> np.ndarray:
    return model.conditional(X).cdf_at(y)


def weighted_mean(w: np.ndarray, y: np.ndarray) -> np.ndarray:
    # centering on a stored response keeps constant responses exact
    c = y[0]
    return c + w @ (y - c)


def predict_mean(model: ForestModel, X) -> np.ndarray:
    return weighted_mean(forest_weights(model, X), model.train_responses)


def leaf_quantiles(model: ForestModel, a: float) -> np.ndarray:
    """The a-quantile of every leaf, indexed by global node id (nan for
    internal nodes)."""
    out = np.full(len(model.feature), np.nan)
    leaves = np.flatnonzero(model.feature < 0)
    if a <= 0.0:
        out[leaves] = -np.inf
        return out
    if a > 1.0:
        out[leaves] = np.inf
        return out
    for node in leaves:
        lo, hi = model.val_ptr[node], model.val_ptr[node + 1]
        i = lo + np.searchsorted(model.val_cdf[lo:hi], a, side="left")
        out[node] = model.values[model.val_id[i]]
    return out


def per_tree_quantiles(model: ForestModel, X, a: float, leaf_ids=None) -> np.ndarray:
    """Per-tree a-quantiles, shape (n_points, n_trees)."""
    if leaf_ids is None:
        leaf_ids = model.apply(X)
    return leaf_quantiles(model, a)[leaf_ids]


def save_forest(model: ForestModel, path) -> None:
    """Write a versioned JSON dump. Floats are written with ``repr``
    precision, so loading reproduces the model exactly."""
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": asdict(model.params),
        "n_features": model.n_features,
        "train_responses": model.train_responses.tolist(),
        "feature": model.feature.tolist(),
        "threshold": model.threshold.tolist(),
        "left": model.left.tolist(),
        "right": model.right.tolist(),
        "roots": model.roots.tolist(),
        "idx_ptr": model.idx_ptr.tolist(),
        "idx_member": model.idx_member.tolist(),
        "idx_count": model.idx_count.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_forest(path) -> ForestModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a forest dump")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported forest dump version {doc.get('version')}")
    ints = lambda k: np.asarray(doc[k], dtype=np.int64)
    return ForestModel(ForestParams(**doc["params"]), doc["n_features"],
                       np.asarray(doc["train_responses"], dtype=float),
                       ints("feature"), np.asarray(doc["threshold"], dtype=float),
                       ints("left"), ints("right"), ints("roots"), ints("idx_ptr"),
                       ints("idx_member"), ints("idx_count"))
