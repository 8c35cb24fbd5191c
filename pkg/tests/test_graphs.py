"""Graph construction: indicator semantics, selection, topology invariants."""

import numpy as np
import pytest

from amg.geometry import PointSet
from amg.graphs import (
    GraphTopology,
    PositionalPlan,
    build_global_graph,
    build_local_graph,
    build_multigraph,
    build_physics_graph,
    format_graph_dump,
    high_frequency_indicator,
)


def split_field_line(n_half=20, freq=6.0):
    """Flat cluster on [0, 0.4] and an oscillating one on [0.6, 1].

    The gap keeps the flat cluster's interpolation sources inside the
    flat cluster, so its residual is exactly zero; oscillating nodes come
    first in index order so zero-score ties resolve inside their half.
    """
    x_sine = np.linspace(0.6, 1.0, n_half)
    x_flat = np.linspace(0.0, 0.4, n_half)
    x = np.concatenate([x_sine, x_flat])
    positions = np.stack([x, np.zeros(2 * n_half)], axis=1)
    values = np.concatenate([np.sin(freq * 2 * np.pi * x_sine), np.zeros(n_half)])
    return PointSet(positions, features=values[:, None])


class TestHighFrequencyIndicator:
    def test_constant_field_is_zero(self):
        rng = np.random.default_rng(0)
        pts = PointSet(rng.random((30, 2)), features=np.full((30, 2), 3.7))
        hf = high_frequency_indicator(pts, ratio=2.0)
        assert np.array_equal(hf, np.zeros(30))

    def test_spike_has_maximal_indicator(self):
        # Direct evaluation of the down-up residual on a 20-node line: with
        # the spike outside the subsample, every source is zero, so the
        # reconstruction is identically zero and H equals |F|.
        from amg.geometry import farthest_point_sampling

        n = 20
        x = np.linspace(0.0, 1.0, n)
        positions = np.stack([x, np.zeros(n)], axis=1)
        subset = set(farthest_point_sampling(positions, n // 2, start="canonical").tolist())
        spike = next(i for i in range(n) if i not in subset)
        values = np.zeros((n, 1))
        values[spike, 0] = 5.0
        pts = PointSet(positions, features=values)
        hf = high_frequency_indicator(pts, ratio=2.0)
        assert hf.argmax() == spike
        assert hf[spike] == pytest.approx(5.0)

    def test_absolute_residual_is_1_homogeneous(self):
        rng = np.random.default_rng(1)
        pts = PointSet(rng.random((25, 2)), features=rng.standard_normal((25, 3)))
        hf1 = high_frequency_indicator(pts, ratio=2.0)
        doubled = PointSet(pts.positions, features=2.0 * pts.features)
        hf2 = high_frequency_indicator(doubled, ratio=2.0)
        assert np.allclose(hf2, 2.0 * hf1, rtol=1e-12)

    def test_featureless_rejected(self):
        with pytest.raises(ValueError):
            high_frequency_indicator(PointSet(np.random.rand(10, 2)), ratio=2.0)
        pts = PointSet(np.random.rand(10, 2), features=np.random.rand(10, 1))
        with pytest.raises(ValueError):
            high_frequency_indicator(pts, ratio=1.0)


class TestLocalGraph:
    def test_full_selection_is_plain_knn(self):
        rng = np.random.default_rng(2)
        pts = PointSet(rng.random((15, 2)), features=rng.standard_normal((15, 1)))
        selected, topo = build_local_graph(pts, n=15, k=3)
        assert np.array_equal(selected, np.arange(15))
        # symmetric, self-loops, and each node keeps at least its own 3 neighbors
        in_deg = topo.in_degrees()
        assert np.all(in_deg >= 4)

    def test_high_frequency_half_selected(self):
        pts = split_field_line(20)
        hf = high_frequency_indicator(pts, ratio=2.0)
        assert np.array_equal(hf[20:], np.zeros(20))  # residual vanishes when flat
        assert hf.max() > 0
        selected, _ = build_local_graph(pts, n=20, k=4)
        assert np.all(pts.positions[selected, 0] > 0.5)

    def test_single_node_selfloops_only(self):
        rng = np.random.default_rng(3)
        pts = PointSet(rng.random((8, 2)), features=rng.standard_normal((8, 1)))
        selected, topo = build_local_graph(pts, n=1, k=6)
        assert len(selected) == 1
        assert topo.n_edges == 8
        assert np.array_equal(topo.edges[:, 0], topo.edges[:, 1])

    def test_k_must_be_below_n(self):
        pts = PointSet(np.random.rand(10, 2), features=np.random.rand(10, 1))
        with pytest.raises(ValueError):
            build_local_graph(pts, n=4, k=4)
        with pytest.raises(ValueError):
            build_local_graph(pts, n=11, k=2)


class TestGlobalGraph:
    def test_saturation_complete_graph(self):
        rng = np.random.default_rng(4)
        n = 8
        pts = PointSet(rng.random((n, 2)), features=rng.standard_normal((n, 4)))
        _, topo = build_global_graph(pts, sample_ratio=1.0, k=n - 1)
        assert topo.n_edges == n * n

    def test_two_feature_clusters_stay_separate(self):
        rng = np.random.default_rng(5)
        n = 20
        feats = np.zeros((n, 2))
        feats[:10] = [1.0, 0.0] + 0.01 * rng.standard_normal((10, 2))
        feats[10:] = [0.0, 1.0] + 0.01 * rng.standard_normal((10, 2))
        pts = PointSet(rng.random((n, 2)), features=feats)
        _, topo = build_global_graph(pts, sample_ratio=1.0, k=1)
        off_diag = topo.edges[topo.edges[:, 0] != topo.edges[:, 1]]
        same_cluster = (off_diag[:, 0] < 10) == (off_diag[:, 1] < 10)
        assert np.all(same_cluster)

    def test_single_sample_degenerate(self):
        rng = np.random.default_rng(6)
        pts = PointSet(rng.random((9, 2)), features=rng.standard_normal((9, 2)))
        selected, topo = build_global_graph(pts, sample_ratio=0.1, k=4)
        assert len(selected) == 1
        assert topo.n_edges == 9

    def test_invalid_arguments(self):
        pts = PointSet(np.random.rand(10, 2), features=np.random.rand(10, 2))
        with pytest.raises(ValueError):
            build_global_graph(pts, sample_ratio=0.0, k=1)
        with pytest.raises(ValueError):
            build_global_graph(pts, sample_ratio=0.5, k=5)


class TestPhysicsGraph:
    @pytest.mark.parametrize("m,expected", [(1, 1), (3, 9), (32, 1024)])
    def test_complete_with_selfloops(self, m, expected):
        topo = build_physics_graph(m)
        assert topo.n_edges == expected
        assert np.all(topo.in_degrees() == m)


class TestTopologyInvariants:
    def make(self, seed, n=30):
        rng = np.random.default_rng(seed)
        return PointSet(rng.random((n, 2)), features=rng.standard_normal((n, 3)))

    def test_symmetrization(self):
        pts = self.make(7)
        for _, topo in (build_local_graph(pts, n=12, k=3),
                        build_global_graph(pts, sample_ratio=0.5, k=3)):
            pairs = {(int(s), int(t)) for s, t in topo.edges if s != t}
            assert all((t, s) in pairs for s, t in pairs)

    def test_every_node_has_indegree(self):
        pts = self.make(8)
        for _, topo in (build_local_graph(pts, n=10, k=2),
                        build_global_graph(pts, sample_ratio=0.3, k=2)):
            assert np.all(topo.in_degrees() >= 1)

    def test_edge_count_bounds(self):
        pts = self.make(9, n=50)
        n, k = 20, 4
        _, local = build_local_graph(pts, n=n, k=k)
        assert local.n_edges <= 2 * k * n + 50
        r, gk = 0.4, 3
        _, glob = build_global_graph(pts, sample_ratio=r, k=gk)
        assert glob.n_edges <= 2 * gk * int(np.ceil(r * 50)) + 50

    def test_dynamic_rebuild_tracks_features(self):
        rng = np.random.default_rng(10)
        positions = rng.random((24, 2))
        a = PointSet(positions, features=rng.standard_normal((24, 4)))
        b = PointSet(positions, features=rng.standard_normal((24, 4)))
        _, ga = build_global_graph(a, sample_ratio=1.0, k=2)
        _, gb = build_global_graph(b, sample_ratio=1.0, k=2)
        assert not np.array_equal(ga.edges, gb.edges)
        sa, _ = build_global_graph(a, sample_ratio=0.5, k=2)
        sb, _ = build_global_graph(b, sample_ratio=0.5, k=2)
        assert np.array_equal(sa, sb)  # FPS subset is positions-only

    def test_validation(self):
        with pytest.raises(ValueError):
            GraphTopology(np.array([[0, 1], [1, 0]]), 2)  # missing self-loops
        with pytest.raises(IndexError):
            GraphTopology(np.array([[0, 0], [5, 0]]), 2)
        with pytest.raises(ValueError):
            GraphTopology(np.array([[0, 0], [0, 0], [1, 1]]), 2)


class TestPositionalPlan:
    def test_plan_matches_direct_build(self):
        rng = np.random.default_rng(11)
        positions = rng.random((40, 2))
        plan = PositionalPlan(positions, local_n=64, local_k=4, global_r=0.25)
        for seed in range(3):
            feats = np.random.default_rng(seed).standard_normal((40, 6))
            pts = PointSet(positions, features=feats)
            s1, t1 = build_local_graph(pts, n=40, k=4, plan=plan)
            s2, t2 = build_local_graph(pts, n=40, k=4)
            assert np.array_equal(s1, s2) and np.array_equal(t1.edges, t2.edges)
            g1, u1 = build_global_graph(pts, 0.25, 2, plan=plan)
            g2, u2 = build_global_graph(pts, 0.25, 2)
            assert np.array_equal(g1, g2) and np.array_equal(u1.edges, u2.edges)

    def test_plan_matches_with_indicator_path(self):
        rng = np.random.default_rng(12)
        positions = rng.random((30, 2))
        plan = PositionalPlan(positions, local_n=10, local_k=3, global_r=0.5)
        feats = rng.standard_normal((30, 2))
        pts = PointSet(positions, features=feats)
        hf1 = high_frequency_indicator(pts, plan=plan)
        hf2 = high_frequency_indicator(pts)
        assert np.array_equal(hf1, hf2)
        s1, t1 = build_local_graph(pts, n=10, k=3, plan=plan)
        s2, t2 = build_local_graph(pts, n=10, k=3)
        assert np.array_equal(s1, s2) and np.array_equal(t1.edges, t2.edges)


GOLDEN_DUMP = """amg-graph-dump v1
n_nodes 4
hf 0.0 0.0 0.0 0.0
local_selected 0 1 2 3
local_edges 8
0 0
1 0
0 1
1 1
2 2
3 2
2 3
3 3
global_selected 0 3
global_edges 6
0 0
3 0
1 1
2 2
0 3
3 3
physics_nodes 2
physics_edges 4
0 0
1 0
0 1
1 1
"""


def test_graph_dump_golden():
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.1, 0.9], [0.0, 1.0]])
    pts = PointSet(positions, features=feats)
    mg = build_multigraph(pts, local_n=4, local_k=1, global_r=0.5, global_k=1,
                          physics_m=2)
    hf = np.zeros(4)
    assert format_graph_dump(mg, hf) == GOLDEN_DUMP
