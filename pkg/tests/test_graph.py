import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggode.datagen import TrajectoryRecord
from ggode.graph import (batch_graphs, brute_force_neighbors, build_temporal_graph, grid_neighbors,
                         grouped_radius_neighbors, kdtree_neighbors, radius_neighbors, temporal_encoding)
from ggode.tensor import Rng


def pair_set(pairs):
    return {tuple(p) for p in np.asarray(pairs).tolist()}


def oracle(points, R):
    n = len(points)
    out = set()
    for i in range(n):
        for j in range(i + 1, n):
            if sum((a - b) ** 2 for a, b in zip(points[i], points[j])) <= R * R:
                out.add((i, j))
    return out


# -- radius_neighbors -------------------------------------------------------------

def test_large_radius_gives_complete_graph():
    p = Rng(0).uniform(0, 1, (30, 3))
    assert len(radius_neighbors(p, 10.0)) == 30 * 29 // 2


def test_boundary_distance_is_included():
    p = np.array([[0.0, 0.0], [0.75, 0.0], [5.0, 5.0]])
    for method in ("auto", "brute", "grid", "kdtree"):
        assert pair_set(radius_neighbors(p, 0.75, method)) == {(0, 1)}, method


def test_thousand_points_match_oracle():
    p = Rng(1).uniform(0, 1, (1000, 2))
    expect = pair_set(brute_force_neighbors(p, 0.1))
    for method in ("auto", "grid", "kdtree"):
        assert pair_set(radius_neighbors(p, 0.1, method)) == expect


def test_output_sorted_and_ordered():
    pairs = radius_neighbors(Rng(2).uniform(0, 1, (200, 3)), 0.3, "kdtree")
    assert np.all(pairs[:, 0] < pairs[:, 1])
    assert [tuple(x) for x in pairs] == sorted(tuple(x) for x in pairs)


def test_brute_force_matches_python_oracle():
    p = Rng(3).uniform(0, 2, (40, 3))
    assert pair_set(brute_force_neighbors(p, 0.7)) == oracle(p.tolist(), 0.7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 300), st.integers(1, 3), st.floats(0.01, 1.5), st.integers(0, 2 ** 31))
def test_backends_agree_with_brute_force(n, dim, R, seed):
    p = Rng(seed).uniform(0, 1, (n, dim))
    expect = pair_set(brute_force_neighbors(p, R)) if n else set()
    for method in ("auto", "grid", "kdtree"):
        assert pair_set(radius_neighbors(p, R, method)) == expect


def test_grouped_neighbors_respect_groups():
    rng = Rng(4)
    p = rng.uniform(0, 1, (300, 2))
    groups = np.repeat(np.arange(3), 100)
    got = pair_set(grouped_radius_neighbors(p, 0.2, groups))
    expect = set()
    for g in range(3):
        idx = np.arange(100) + 100 * g
        expect |= {(idx[i], idx[j]) for i, j in pair_set(brute_force_neighbors(p[idx], 0.2))}
    assert got == expect
    small = pair_set(grouped_radius_neighbors(p[:60], 0.2, np.arange(60) % 2))
    assert all((a % 2) == (b % 2) for a, b in small)


def test_invalid_radius():
    with pytest.raises(ValueError):
        radius_neighbors(np.zeros((3, 2)), -1.0)
    with pytest.raises(ValueError):
        radius_neighbors(np.zeros((3, 2)), 1.0, "octree")


def test_grid_and_kdtree_edge_sizes():
    assert len(grid_neighbors(np.zeros((1, 2)), 1.0)) == 0
    assert len(kdtree_neighbors(np.zeros((0, 2)), 1.0)) == 0


# -- temporal graph -------------------------------------------------------------------

def window(positions):
    p = np.asarray(positions, dtype=float)
    return TrajectoryRecord(0, 1.0, np.arange(len(p), dtype=float), p, np.zeros_like(p), np.zeros_like(p))


def test_no_edges_when_radius_zero():
    g = build_temporal_graph(window(Rng(0).uniform(0, 1, (4, 3, 2))), 0.0)
    assert g.n_nodes == 12 and len(g.spatial_edges) == 0 and len(g.temporal_edges) == 9


def test_overlapping_agents():
    g = build_temporal_graph(window(np.zeros((5, 2, 2))), 0.1)
    assert len(g.spatial_edges) == 5


@pytest.mark.parametrize("N", range(1, 6))
@pytest.mark.parametrize("K", range(2, 7))
def test_graph_counts(N, K):
    pos = Rng(N * 10 + K).uniform(0, 1, (K, N, 2))
    g = build_temporal_graph(window(pos), 0.4)
    assert g.n_nodes == N * K
    assert len(g.temporal_edges) == N * (K - 1)
    t_src, t_dst = g.temporal_edges[:, 0] // N, g.temporal_edges[:, 1] // N
    assert np.all(t_dst == t_src + 1)
    assert np.all(g.temporal_edges[:, 0] % N == g.temporal_edges[:, 1] % N)
    for a, b in g.spatial_edges:
        t = a // N
        assert b // N == t
        assert np.linalg.norm(pos[t, a % N] - pos[t, b % N]) <= 0.4


def test_spatial_edges_match_oracle_per_slice():
    rec = window(Rng(5).uniform(0, 2, (6, 12, 3)))
    g = build_temporal_graph(rec, 0.8)
    for t in range(6):
        here = {(a - t * 12, b - t * 12) for a, b in g.spatial_edges.tolist() if a // 12 == t}
        assert here == oracle(rec.positions[t].tolist(), 0.8)


def test_graph_needs_two_steps():
    with pytest.raises(ValueError):
        build_temporal_graph(window(np.zeros((1, 2, 2))), 1.0)


def test_directed_edges_and_batch():
    rec = window(np.zeros((3, 2, 2)))
    g = build_temporal_graph(rec, 1.0)
    src, dst, dt = g.directed_edges()
    # 3 spatial pairs in both directions plus 4 temporal edges
    assert len(src) == 3 * 2 + 4
    assert set(dt.tolist()) == {0.0, -1.0}
    b = batch_graphs([g, g])
    assert b.n_nodes == 12 and b.n_samples == 2
    assert b.agent_rows.shape == (4, 3)
    np.testing.assert_array_equal(b.agent_rows[2], [6, 8, 10])
    np.testing.assert_array_equal(b.agent_sample, [0, 0, 1, 1])
    assert "spatial_edges" in g.to_json()


# -- temporal encoding ----------------------------------------------------------------

def test_te_zero():
    np.testing.assert_array_equal(temporal_encoding(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_te_d2():
    np.testing.assert_allclose(temporal_encoding(1.0, 2), [math.sin(1), math.cos(1)], atol=1e-15)
    assert abs(temporal_encoding(1.0, 2)[0] - 0.84147) < 1e-5


def test_te_parity_and_frequencies():
    d, dt = 6, 2.5
    te = temporal_encoding(dt, d)
    for i in range(d // 2):
        w = 10000 ** (2 * i / d)
        assert te[2 * i] == pytest.approx(math.sin(dt / w), abs=1e-15)
        assert te[2 * i + 1] == pytest.approx(math.cos(dt / w), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(1, 64))
def test_te_pythagorean(dt, half):
    te = temporal_encoding(dt, 2 * half)
    np.testing.assert_allclose(te[0::2] ** 2 + te[1::2] ** 2, 1.0, atol=1e-12)
    assert np.all(np.abs(te) <= 1.0)


def test_te_odd_width():
    with pytest.raises(ValueError):
        temporal_encoding(1.0, 5)


def test_te_vectorized():
    dts = np.array([0.0, 1.0, -3.0])
    np.testing.assert_array_equal(temporal_encoding(dts, 4), np.stack([temporal_encoding(x, 4) for x in dts]))
