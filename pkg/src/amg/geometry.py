"""Point-set primitives: farthest point sampling, exhaustive nearest
neighbors under Euclidean and cosine metrics, and inverse-distance
interpolation of scattered data.

All functions are pure and operate on plain numpy arrays. Neighbor
queries are exhaustive scans (problem sizes here stay well below the
point where a spatial index would pay off) and break ties by lowest
index so results are fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PointSet",
    "NeighborList",
    "farthest_point_sampling",
    "knn_euclidean",
    "knn_cosine",
    "idw_interpolate",
    "IdwPlan",
    "idw_plan",
]

_COINCIDENT_TOL = 1e-12
_COSINE_EPS = 1e-12


@dataclass
class PointSet:
    """N positions in R^d with optional per-node feature rows."""

    positions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise ValueError("positions must be a non-empty (N, d) array")
        if self.positions.shape[1] not in (2, 3):
            raise ValueError("positions must be 2- or 3-dimensional")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
                raise ValueError("features must be (N, C) matching positions")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class NeighborList:
    """Per query node, neighbor indices ordered by the query metric.

    ``indices``/``metric`` are (Q, k); rows are sorted ascending for
    distances and descending for similarities, ties by lowest index.
    """

    indices: np.ndarray
    metric: np.ndarray


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("qkd,qkd->qk", diff, diff)


def farthest_point_sampling(positions: np.ndarray, n: int,
                            start: int | str = "canonical",
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy subset of ``n`` indices maximizing minimum pairwise distance.

    The first element is the start point; every later pick maximizes the
    minimum Euclidean distance to everything already selected, ties by
    lowest index.

    ``start`` may be an index, ``"canonical"`` (the lexicographically
    smallest position, giving runs that are reproducible and independent
    of node order), or ``"random"`` (drawn from ``rng``).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_points = positions.shape[0]
    if not 1 <= n <= n_points:
        raise ValueError(f"cannot sample {n} of {n_points} points")
    if isinstance(start, str):
        if start == "canonical":
            start_idx = int(np.lexsort(positions.T[::-1])[0])
        elif start == "random":
            if rng is None:
                raise ValueError("start='random' requires an rng")
            start_idx = int(rng.integers(n_points))
        else:
            raise ValueError(f"unknown start mode {start!r}")
    else:
        start_idx = int(start)
        if not 0 <= start_idx < n_points:
            raise ValueError(f"start index {start_idx} out of range")

    selected = np.empty(n, dtype=np.int64)
    selected[0] = start_idx
    min_dists = ((positions - positions[start_idx]) ** 2).sum(axis=1)
    min_dists[start_idx] = -1.0  # off the candidate list
    for i in range(1, n):
        nxt = int(np.argmax(min_dists))
        selected[i] = nxt
        d = ((positions - positions[nxt]) ** 2).sum(axis=1)
        np.minimum(min_dists, d, out=min_dists)
        min_dists[nxt] = -1.0
    return selected


def _resolve_exclude_self(queries, keys, exclude_self):
    if exclude_self is None:
        return queries is keys
    return bool(exclude_self)


def knn_euclidean(query_positions: np.ndarray, key_positions: np.ndarray, k: int,
                  exclude_self: bool | None = None) -> NeighborList:
    """The k keys closest to each query in Euclidean distance.

    Self matches are excluded automatically when queries and keys are the
    same array object (pass ``exclude_self`` to override).
    """
    exclude = _resolve_exclude_self(query_positions, key_positions, exclude_self)
    queries = np.asarray(query_positions, dtype=np.float64)
    keys = np.asarray(key_positions, dtype=np.float64)
    n_keys = keys.shape[0]
    available = n_keys - 1 if exclude else n_keys
    if not 1 <= k <= available:
        raise ValueError(f"k={k} exceeds available keys ({available})")
    d2 = _squared_distances(queries, keys)
    if exclude:
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborList(indices=order, metric=dists)


def knn_cosine(query_features: np.ndarray, key_features: np.ndarray, k: int,
               exclude_self: bool | None = None) -> NeighborList:
    """The k keys most cosine-similar to each query's feature row.

    Zero-norm rows are treated as similarity 0 to everything (epsilon
    guard in the denominator).
    """
    exclude = _resolve_exclude_self(query_features, key_features, exclude_self)
    q = np.asarray(query_features, dtype=np.float64)
    key = np.asarray(key_features, dtype=np.float64)
    n_keys = key.shape[0]
    available = n_keys - 1 if exclude else n_keys
    if not 1 <= k <= available:
        raise ValueError(f"k={k} exceeds available keys ({available})")
    qn = np.linalg.norm(q, axis=1)
    kn = np.linalg.norm(key, axis=1)
    sims = (q @ key.T) / (qn[:, None] * kn[None, :] + _COSINE_EPS)
    if exclude:
        np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return NeighborList(indices=order, metric=np.take_along_axis(sims, order, axis=1))


@dataclass
class IdwPlan:
    """Positions-only part of an IDW interpolation, reusable across fields."""

    indices: np.ndarray      # (M, k) nearest source per target
    weights: np.ndarray      # (M, k) normalized inverse-distance weights
    coincident: np.ndarray   # (M,) targets sitting exactly on a source

    def apply(self, source_features: np.ndarray) -> np.ndarray:
        feats = np.asarray(source_features, dtype=np.float64)[self.indices]
        anchor = feats[:, 0, :]
        out = anchor + np.einsum("mk,mkc->mc", self.weights,
                                 feats - anchor[:, None, :])
        if np.any(self.coincident):
            out[self.coincident] = feats[self.coincident, 0]
        return out


def idw_plan(source_positions: np.ndarray, target_positions: np.ndarray,
             k: int = 3, power: float = 2.0) -> IdwPlan:
    """Precompute neighbor indices and weights for ``idw_interpolate``."""
    src_pos = np.asarray(source_positions, dtype=np.float64)
    tgt = np.asarray(target_positions, dtype=np.float64)
    if src_pos.shape[0] == 0:
        raise ValueError("idw interpolation requires at least one source point")
    if k > src_pos.shape[0]:
        raise ValueError(f"k={k} exceeds source count {src_pos.shape[0]}")
    neighbors = knn_euclidean(tgt, src_pos, k, exclude_self=False)
    idx, dist = neighbors.indices, neighbors.metric
    weights = 1.0 / (dist**power + _COINCIDENT_TOL)
    weights /= weights.sum(axis=1, keepdims=True)
    return IdwPlan(indices=idx, weights=weights,
                   coincident=dist[:, 0] < _COINCIDENT_TOL)


def idw_interpolate(source_positions: np.ndarray, source_features: np.ndarray,
                    target_positions: np.ndarray, k: int = 3,
                    power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted interpolation of scattered features.

    Each target takes the weighted mean of its k nearest source features
    with weights 1 / (dist^power + eps). Targets coincident with a source
    (distance below 1e-12) copy that source's row exactly; constant
    fields are reproduced exactly everywhere (the blend is anchored on
    the nearest source, so weights need not sum to one bitwise).
    """
    plan = idw_plan(source_positions, target_positions, k=k, power=power)
    return plan.apply(source_features)
