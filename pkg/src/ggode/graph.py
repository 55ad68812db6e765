"""Radius neighbor search and the observation temporal graph."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .datagen import TrajectoryRecord

_EMPTY_PAIRS = np.zeros((0, 2), dtype=np.int64)


def _sorted_pairs(pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return _EMPTY_PAIRS
    pairs = np.asarray(pairs, dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def brute_force_neighbors(points: np.ndarray, R: float) -> np.ndarray:
    """All pairs i < j with squared distance <= R**2, by full enumeration."""
    p = np.asarray(points, dtype=np.float64)
    d = p[:, None, :] - p[None, :, :]
    within = np.einsum("ijk,ijk->ij", d, d) <= R * R
    i, j = np.nonzero(np.triu(within, 1))
    return _sorted_pairs(np.stack([i, j], axis=1))


def grid_neighbors(points: np.ndarray, R: float) -> np.ndarray:
    """Uniform cell grid with cell width ``R``; only adjacent cells are compared."""
    p = np.asarray(points, dtype=np.float64)
    n, dim = p.shape
    if n < 2:
        return _EMPTY_PAIRS
    cells = np.floor((p - p.min(axis=0)) / R).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for idx, c in enumerate(map(tuple, cells)):
        buckets.setdefault(c, []).append(idx)
    buckets = {c: np.array(v) for c, v in buckets.items()}
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=dim)]
    r2 = R * R
    out = []
    for c, members in buckets.items():
        for off in offsets:
            other = buckets.get(tuple(a + b for a, b in zip(c, off)))
            if other is None:
                continue
            d = p[members][:, None, :] - p[other][None, :, :]
            ii, jj = np.nonzero(np.einsum("ijk,ijk->ij", d, d) <= r2)
            a, b = members[ii], other[jj]
            keep = a < b
            if keep.any():
                out.append(np.stack([a[keep], b[keep]], axis=1))
    return _sorted_pairs(np.concatenate(out)) if out else _EMPTY_PAIRS


def kdtree_neighbors(points: np.ndarray, R: float) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return _EMPTY_PAIRS
    pairs = cKDTree(p).query_pairs(R * (1.0 + 1e-9) + 1e-300, output_type="ndarray")
    if len(pairs) == 0:
        return _EMPTY_PAIRS
    d = p[pairs[:, 0]] - p[pairs[:, 1]]
    # same closed-ball test as the other backends
    return _sorted_pairs(pairs[np.einsum("ij,ij->i", d, d) <= R * R])


def radius_neighbors(points: np.ndarray, R: float, method: str = "auto") -> np.ndarray:
    """Pairs ``(i, j)``, ``i < j``, with ``||p_i - p_j|| <= R``, sorted lexicographically.

    ``method`` is one of ``"auto"``, ``"grid"``, ``"kdtree"`` or ``"brute"``.
    ``auto`` enumerates small inputs directly, uses the cell grid when the
    points are dense relative to ``R`` and a k-d tree otherwise.
    """
    p = np.asarray(points, dtype=np.float64)
    if R < 0 or not np.isfinite(R):
        raise ValueError("radius must be finite and non-negative")
    if len(p) < 2:
        return _EMPTY_PAIRS
    if R == 0.0:
        return brute_force_neighbors(p, R)
    if method == "auto":
        if len(p) <= 64:
            method = "brute"
        else:
            extent = np.ptp(p, axis=0)
            n_cells = float(np.prod(np.maximum(extent / R, 1.0)))
            method = "grid" if n_cells <= 4 * len(p) else "kdtree"
    if method == "brute":
        return brute_force_neighbors(p, R)
    if method == "grid":
        return grid_neighbors(p, R)
    if method == "kdtree":
        return kdtree_neighbors(p, R)
    raise ValueError(f"unknown neighbor method {method!r}")


def grouped_radius_neighbors(points: np.ndarray, R: float, groups: np.ndarray) -> np.ndarray:
    """Radius pairs restricted to points sharing a group id (one group per sample)."""
    p = np.asarray(points, dtype=np.float64)
    groups = np.asarray(groups)
    if len(p) <= 256:
        d = p[:, None, :] - p[None, :, :]
        within = (np.einsum("ijk,ijk->ij", d, d) <= R * R) & (groups[:, None] == groups[None, :])
        i, j = np.nonzero(np.triu(within, 1))
        return np.stack([i, j], axis=1)
    out = []
    for g in np.unique(groups):
        idx = np.nonzero(groups == g)[0]
        pairs = radius_neighbors(p[idx], R)
        if len(pairs):
            out.append(idx[pairs])
    return np.concatenate(out) if out else _EMPTY_PAIRS


def temporal_encoding(dt, d: int) -> np.ndarray:
    """Sinusoidal encoding: even entries sin(dt / 10000^(2i/d)), odd entries cos.

    ``dt`` may be a scalar (returns shape (d,)) or an array (returns
    ``dt.shape + (d,)``).
    """
    if d < 2 or d % 2:
        raise ValueError(f"temporal encoding width must be even and >= 2, got {d}")
    dt = np.asarray(dt, dtype=np.float64)
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    angle = dt[..., None] * freq
    out = np.empty(dt.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


@dataclass
class TemporalGraph:
    """Observation graph over (agent, time) nodes; node id = t * N + i.

    Spatial edges are stored once per unordered pair; temporal edges are
    directed from (i, t-1) to (i, t).
    """

    n_agents: int
    n_times: int
    features: np.ndarray
    spatial_edges: np.ndarray
    temporal_edges: np.ndarray
    env_id: int = -1

    @property
    def n_nodes(self) -> int:
        return self.n_agents * self.n_times

    def node_id(self, agent: int, t: int) -> int:
        return t * self.n_agents + agent

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, t_src - t_dst) for message passing; spatial edges in both directions."""
        s, t = self.spatial_edges, self.temporal_edges
        src = np.concatenate([s[:, 0], s[:, 1], t[:, 0]])
        dst = np.concatenate([s[:, 1], s[:, 0], t[:, 1]])
        tsrc, tdst = src // self.n_agents, dst // self.n_agents
        return src, dst, (tsrc - tdst).astype(np.float64)

    def to_json(self) -> str:
        """Debug dump of the node and edge lists."""
        nodes = [{"agent": int(i % self.n_agents), "t": int(i // self.n_agents),
                  "x": self.features[i].tolist()} for i in range(self.n_nodes)]
        return json.dumps({"env_id": self.env_id, "nodes": nodes,
                           "spatial_edges": self.spatial_edges.tolist(),
                           "temporal_edges": self.temporal_edges.tolist()})


def build_temporal_graph(window: TrajectoryRecord, R: float, features: np.ndarray | None = None) -> TemporalGraph:
    """Temporal graph of a K-step window; connectivity uses ``window.positions``.

    ``features`` (K, N, F) overrides the node features, e.g. with normalized
    values while distances stay in simulation units.
    """
    K, N = window.positions.shape[:2]
    if K < 2:
        raise ValueError(f"a temporal graph needs at least 2 time steps, got {K}")
    feats = window.features() if features is None else np.asarray(features, dtype=np.float64)
    spatial = []
    for t in range(K):
        pairs = radius_neighbors(window.positions[t], R)
        if len(pairs):
            spatial.append(pairs + t * N)
    spatial_edges = np.concatenate(spatial) if spatial else _EMPTY_PAIRS.copy()
    agents = np.arange(N)
    temporal_edges = np.concatenate(
        [np.stack([(t - 1) * N + agents, t * N + agents], axis=1) for t in range(1, K)]
    ) if K > 1 else _EMPTY_PAIRS.copy()
    return TemporalGraph(N, K, feats.reshape(K * N, -1), spatial_edges, temporal_edges, window.env_id)


@dataclass
class GraphBatch:
    """Several temporal graphs with equal window length fused block-diagonally."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_dt: np.ndarray
    agent_rows: np.ndarray
    agent_sample: np.ndarray
    n_samples: int
    n_times: int

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    @property
    def n_agents(self) -> int:
        return len(self.agent_sample)


def batch_graphs(graphs) -> GraphBatch:
    graphs = list(graphs)
    K = graphs[0].n_times
    if any(g.n_times != K for g in graphs):
        raise ValueError("all graphs in a batch must share the window length")
    feats, src, dst, dts, rows, owner = [], [], [], [], [], []
    node_off = 0
    for s, g in enumerate(graphs):
        a, b, dt = g.directed_edges()
        src.append(a + node_off)
        dst.append(b + node_off)
        dts.append(dt)
        feats.append(g.features)
        # rows[i, t] = node id of agent i at time t
        rows.append(node_off + np.arange(K)[None, :] * g.n_agents + np.arange(g.n_agents)[:, None])
        owner.append(np.full(g.n_agents, s))
        node_off += g.n_nodes
    return GraphBatch(np.concatenate(feats), np.concatenate(src).astype(np.int64),
                      np.concatenate(dst).astype(np.int64), np.concatenate(dts),
                      np.concatenate(rows), np.concatenate(owner), len(graphs), K)
