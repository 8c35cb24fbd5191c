"""Construction of the three graphs each processing layer works on.

* local graph: Euclidean kNN over the nodes with the highest
  high-frequency indicator (detail-rich regions);
* global graph: feature-cosine kNN over a farthest-point-sampled subset
  spanning the whole domain;
* physics graph: a small set of virtual nodes, fully connected.

Every graph carries a self-loop on every node so attention neighborhoods
are never empty; nodes outside the sampled subsets pass through the
token mixer unchanged. Edge lists are canonicalized (sorted by target,
then source, deduplicated) which both fixes the reduction order of
downstream segment ops and makes dumps reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import RowScatterPlan, SegmentPlan
from .geometry import (
    IdwPlan,
    PointSet,
    farthest_point_sampling,
    idw_plan,
    knn_cosine,
    knn_euclidean,
)

__all__ = [
    "GraphTopology",
    "MultiGraph",
    "PositionalPlan",
    "high_frequency_indicator",
    "build_local_graph",
    "build_global_graph",
    "build_physics_graph",
    "build_multigraph",
    "format_graph_dump",
]

HF_IDW_NEIGHBORS = 3
HF_IDW_POWER = 2.0


class GraphTopology:
    """Directed edge set over ``n_nodes`` with universal self-loops.

    ``edges`` is an (E, 2) int64 array of (source, target) pairs, sorted
    by (target, source) and free of duplicates. Plans for the segment
    ops are built lazily and cached, since one topology typically feeds
    several attention evaluations.
    """

    __slots__ = ("edges", "n_nodes", "_segment_plan", "_source_scatter")

    def __init__(self, edges: np.ndarray, n_nodes: int):
        edges = np.asarray(edges, dtype=np.int64)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ValueError("edges must be an (E, 2) array of index pairs")
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise IndexError("edge index out of range")
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        edges = edges[order]
        if edges.shape[0] > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise ValueError("duplicate edges")
        selfloops = edges[edges[:, 0] == edges[:, 1], 0]
        if selfloops.size != n_nodes:
            raise ValueError("every node must carry a self-loop")
        self.edges = edges
        self.n_nodes = int(n_nodes)
        self._segment_plan: SegmentPlan | None = None
        self._source_scatter: RowScatterPlan | None = None

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def segment_plan(self) -> SegmentPlan:
        if self._segment_plan is None:
            self._segment_plan = SegmentPlan(self.dst, self.n_nodes)
        return self._segment_plan

    @property
    def source_scatter(self) -> RowScatterPlan:
        if self._source_scatter is None:
            self._source_scatter = RowScatterPlan(self.src, self.n_nodes)
        return self._source_scatter

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)


@dataclass
class MultiGraph:
    """The per-layer graph bundle plus the sampled index sets."""

    local: GraphTopology
    global_: GraphTopology
    physics: GraphTopology
    local_selected: np.ndarray
    global_selected: np.ndarray


def _assemble(pair_src, pair_dst, n_nodes: int) -> GraphTopology:
    """Symmetrize neighbor pairs, add self-loops everywhere, dedupe."""
    loops = np.arange(n_nodes, dtype=np.int64)
    src = np.concatenate([pair_src, pair_dst, loops])
    dst = np.concatenate([pair_dst, pair_src, loops])
    edges = np.stack([src, dst], axis=1)
    order = np.lexsort((edges[:, 0], edges[:, 1]))
    edges = edges[order]
    keep = np.r_[True, np.any(edges[1:] != edges[:-1], axis=1)]
    return GraphTopology(edges[keep], n_nodes)


def high_frequency_indicator(points: PointSet, ratio: float = 2.0,
                             fps_start: int | str = "canonical",
                             plan: "PositionalPlan | None" = None) -> np.ndarray:
    """Per-node residual against a subsampled-and-reinterpolated field.

    The feature map is farthest-point subsampled to ceil(N / ratio)
    nodes, interpolated back to all positions (inverse-distance, k=3,
    power=2), and the channel-summed absolute residual is returned.
    Smooth regions reconstruct well and score near zero; detail-rich
    regions score high.
    """
    if points.features is None:
        raise ValueError("high-frequency indicator requires node features")
    if ratio <= 1.0:
        raise ValueError("downsampling ratio must exceed 1")
    if points.n < 4:
        raise ValueError("need at least 4 points")
    if plan is not None and plan.hf is not None:
        sub_idx, interp = plan.hf
    else:
        n_sub = math.ceil(points.n / ratio)
        sub_idx = farthest_point_sampling(points.positions, n_sub, start=fps_start)
        interp = idw_plan(points.positions[sub_idx], points.positions,
                          k=min(HF_IDW_NEIGHBORS, n_sub), power=HF_IDW_POWER)
    smooth = interp.apply(points.features[sub_idx])
    return np.abs(points.features - smooth).sum(axis=1)


def _top_n_by_score(scores: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:n])


def build_local_graph(points: PointSet, n: int, k: int, ratio: float = 2.0,
                      fps_start: int | str = "canonical",
                      plan: "PositionalPlan | None" = None,
                      ) -> tuple[np.ndarray, GraphTopology]:
    """Euclidean kNN graph over the top-n highest-indicator nodes.

    Edges run both ways between a selected node and each of its k
    nearest selected neighbors; all N nodes get self-loops. With n == 1
    the graph degenerates to self-loops only; otherwise k < n is
    required.
    """
    n_points = points.n
    if not 1 <= n <= n_points:
        raise ValueError(f"cannot select {n} of {n_points} nodes")
    if n > 1 and k >= n:
        raise ValueError(f"neighbor count k={k} must be smaller than selection n={n}")

    if n >= n_points:
        selected = np.arange(n_points, dtype=np.int64)  # top-N of N: indicator moot
    else:
        scores = high_frequency_indicator(points, ratio, fps_start, plan=plan)
        selected = _top_n_by_score(scores, n)

    if n == 1:
        return selected, _assemble(np.empty(0, np.int64), np.empty(0, np.int64), n_points)

    if plan is not None and n >= n_points and plan.local_full is not None:
        return selected, plan.local_full

    neighbors = knn_euclidean(points.positions[selected], points.positions[selected],
                              k, exclude_self=True)
    queries = np.repeat(selected, k)
    found = selected[neighbors.indices.reshape(-1)]
    return selected, _assemble(found, queries, n_points)


def build_global_graph(points: PointSet, sample_ratio: float, k: int,
                       fps_start: int | str = "canonical",
                       plan: "PositionalPlan | None" = None,
                       ) -> tuple[np.ndarray, GraphTopology]:
    """Feature-cosine kNN graph over a farthest-point-sampled subset.

    ceil(sample_ratio * N) nodes are picked by FPS on positions (domain
    coverage); each connects to its k most feature-similar sampled peers.
    Unsampled nodes keep only their self-loop.
    """
    if points.features is None:
        raise ValueError("global graph requires node features")
    if not 0.0 < sample_ratio <= 1.0:
        raise ValueError("sample_ratio must lie in (0, 1]")
    n_points = points.n
    m = math.ceil(sample_ratio * n_points)
    if m > 1 and k >= m:
        raise ValueError(f"neighbor count k={k} must be smaller than sample size {m}")

    if plan is not None and plan.global_fps is not None and plan.global_fps.size == m:
        selected = plan.global_fps
    else:
        selected = np.sort(farthest_point_sampling(points.positions, m, start=fps_start))

    if m == 1:
        return selected, _assemble(np.empty(0, np.int64), np.empty(0, np.int64), n_points)

    feats = points.features[selected]
    neighbors = knn_cosine(feats, feats, k, exclude_self=True)
    queries = np.repeat(selected, k)
    found = selected[neighbors.indices.reshape(-1)]
    return selected, _assemble(found, queries, n_points)


def build_physics_graph(m: int) -> GraphTopology:
    """Complete directed graph (self-loops included) on m virtual nodes."""
    if m < 1:
        raise ValueError("need at least one virtual node")
    idx = np.arange(m, dtype=np.int64)
    src = np.tile(idx, m)
    dst = np.repeat(idx, m)
    return GraphTopology(np.stack([src, dst], axis=1), m)


class PositionalPlan:
    """Position-derived graph structures reused across layers and epochs.

    Local/global graphs are rebuilt from the running features at every
    layer, but several ingredients depend only on node positions: the
    FPS subset of the global graph, the subsample-and-interpolate plan
    behind the indicator, and (when the local budget covers all nodes,
    so selection is the identity) the full local kNN graph. Using a plan
    changes nothing semantically; builders fall back to direct
    computation when no plan is given.
    """

    def __init__(self, positions: np.ndarray, local_n: int, local_k: int,
                 global_r: float, hf_ratio: float = 2.0,
                 fps_start: int | str = "canonical"):
        positions = np.asarray(positions, dtype=np.float64)
        n_points = positions.shape[0]
        m = math.ceil(global_r * n_points)
        self.global_fps = np.sort(farthest_point_sampling(positions, m, start=fps_start))

        self.local_full: GraphTopology | None = None
        if min(local_n, n_points) >= n_points and n_points > 1:
            neighbors = knn_euclidean(positions, positions, local_k, exclude_self=True)
            queries = np.repeat(np.arange(n_points, dtype=np.int64), local_k)
            found = neighbors.indices.reshape(-1)
            self.local_full = _assemble(found, queries, n_points)

        self.hf: tuple[np.ndarray, IdwPlan] | None = None
        if min(local_n, n_points) < n_points and n_points >= 4:
            n_sub = math.ceil(n_points / hf_ratio)
            sub_idx = farthest_point_sampling(positions, n_sub, start=fps_start)
            interp = idw_plan(positions[sub_idx], positions,
                              k=min(HF_IDW_NEIGHBORS, n_sub), power=HF_IDW_POWER)
            self.hf = (sub_idx, interp)


def build_multigraph(points: PointSet, local_n: int, local_k: int,
                     global_r: float, global_k: int, physics_m: int,
                     hf_ratio: float = 2.0,
                     fps_start: int | str = "canonical",
                     plan: PositionalPlan | None = None) -> MultiGraph:
    """All three graphs for one layer's inputs."""
    local_sel, local = build_local_graph(points, min(local_n, points.n), local_k,
                                         hf_ratio, fps_start, plan=plan)
    global_sel, global_ = build_global_graph(points, global_r, global_k,
                                             fps_start, plan=plan)
    return MultiGraph(local=local, global_=global_, physics=build_physics_graph(physics_m),
                      local_selected=local_sel, global_selected=global_sel)


def format_graph_dump(mg: MultiGraph, hf_values: np.ndarray) -> str:
    """Stable plain-text dump of a multigraph (golden-file format v1)."""
    lines = ["amg-graph-dump v1", f"n_nodes {mg.local.n_nodes}"]
    lines.append("hf " + " ".join(repr(float(v)) for v in hf_values))

    def emit(tag: str, selected: np.ndarray, topo: GraphTopology):
        lines.append(f"{tag}_selected " + " ".join(str(int(i)) for i in selected))
        lines.append(f"{tag}_edges {topo.n_edges}")
        for s, t in topo.edges:
            lines.append(f"{s} {t}")

    emit("local", mg.local_selected, mg.local)
    emit("global", mg.global_selected, mg.global_)
    lines.append(f"physics_nodes {mg.physics.n_nodes}")
    lines.append(f"physics_edges {mg.physics.n_edges}")
    for s, t in mg.physics.edges:
        lines.append(f"{s} {t}")
    return "\n".join(lines) + "\n"
