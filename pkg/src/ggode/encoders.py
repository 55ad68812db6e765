"""Initial-state and environment encoders over the observation temporal graph.

Both encoders run a spatial-temporal attention GNN followed by per-agent
sequence attention. The initial-state branch maps each agent's sequence
summary to a Gaussian posterior over its latent initial state; the
environment branch pools all agents of a window into one vector ``u``.
Matrices act on row vectors (``h @ W``).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .graph import GraphBatch, TemporalGraph, batch_graphs, temporal_encoding
from .tensor import Mlp2, Module, Rng, Tensor, init_matrix

SIGMA_FLOOR = 1e-6


class GnnLayer(Module):
    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, ln_gain: Tensor, ln_bias: Tensor):
        self.wq, self.wk, self.wv = wq, wk, wv
        self.ln_gain, self.ln_bias = ln_gain, ln_bias

    @classmethod
    def init(cls, d: int, rng: Rng, name: str) -> "GnnLayer":
        return cls(init_matrix(d, d, rng, f"{name}.wq"), init_matrix(d, d, rng, f"{name}.wk"),
                   init_matrix(d, d, rng, f"{name}.wv"),
                   Tensor(np.ones(d), requires_grad=True, name=f"{name}.ln_gain"),
                   Tensor(np.zeros(d), requires_grad=True, name=f"{name}.ln_bias"))


class Branch(Module):
    """Input projection, L attention layers and the sequence-attention matrix."""

    def __init__(self, proj_w: Tensor, proj_b: Tensor, layers: list, w_a: Tensor):
        self.proj_w, self.proj_b = proj_w, proj_b
        self.layers = layers
        self.w_a = w_a

    @property
    def d(self) -> int:
        return self.proj_w.shape[1]

    @classmethod
    def init(cls, n_features: int, d: int, n_layers: int, rng: Rng, name: str) -> "Branch":
        bound = 1.0 / math.sqrt(n_features)
        return cls(init_matrix(n_features, d, rng, f"{name}.proj_w"),
                   Tensor(rng.uniform(-bound, bound, d), requires_grad=True, name=f"{name}.proj_b"),
                   [GnnLayer.init(d, rng, f"{name}.layer{k}") for k in range(n_layers)],
                   init_matrix(d, d, rng, f"{name}.w_a"))


class EncoderParams(Module):
    """Parameters of both encoders.

    With ``shared=True`` the environment encoder reuses the initial-state
    branch (the "shared encoders" ablation); ``w_b`` is always separate.
    """

    def __init__(self, state: Branch, env: Branch, f_trans: Mlp2, w_b: Tensor):
        self.state = state
        self.env = env
        self.f_trans = f_trans
        self.w_b = w_b

    @property
    def shared(self) -> bool:
        return self.state is self.env

    @classmethod
    def init(cls, n_features: int, d: int = 64, n_layers: int = 2, trans_hidden: int = 128,
             rng: Rng | None = None, shared: bool = False) -> "EncoderParams":
        rng = rng or Rng(0)
        state = Branch.init(n_features, d, n_layers, rng.child(1), "enc.state")
        env = state if shared else Branch.init(n_features, d, n_layers, rng.child(2), "enc.env")
        f_trans = Mlp2.init(d, trans_hidden, 2 * d, rng.child(3), "enc.f_trans")
        return cls(state, env, f_trans, init_matrix(d, d, rng.child(4), "enc.w_b"))


def _as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else batch_graphs([graph])


def st_gnn_layer(graph, H: Tensor, layer: GnnLayer) -> Tensor:
    """One attention layer with residual connection and LayerNorm.

    A neighbor's representation gets the temporal encoding of
    ``t_neighbor - t_node`` added before the key and value projections;
    scores are scaled dot products normalized over all in-neighbors.
    """
    g = _as_batch(graph)
    n, d = H.shape
    if len(g.src):
        te = temporal_encoding(g.edge_dt, d)
        h_nb = T.take_rows(H, g.src) + te
        keys = h_nb @ layer.wk
        queries = T.take_rows(H @ layer.wq, g.dst)
        scores = (keys * queries).sum(axis=1) * (1.0 / math.sqrt(d))
        alpha = T.segment_softmax(scores, g.dst, n)
        values = h_nb @ layer.wv
        agg = T.segment_sum(values * alpha.reshape(-1, 1), g.dst, n)
        H = H + T.tanh(agg)
    return T.layer_norm(H, layer.ln_gain, layer.ln_bias)


def attention_weights(graph, H: np.ndarray, layer: GnnLayer) -> tuple[np.ndarray, np.ndarray]:
    """Normalized attention ``(alpha, dst)`` per directed edge, for inspection."""
    g = _as_batch(graph)
    with T.no_grad():
        d = H.shape[1]
        h_nb = H[g.src] + temporal_encoding(g.edge_dt, d)
        scores = np.einsum("ij,ij->i", h_nb @ layer.wk.data, (H @ layer.wq.data)[g.dst]) / math.sqrt(d)
        alpha = T.segment_softmax(Tensor(scores), g.dst, len(H)).data
    return alpha, g.dst


def encode_nodes(graph, branch: Branch) -> Tensor:
    """Project raw node features, then apply every attention layer."""
    g = _as_batch(graph)
    H = T.linear(Tensor(g.features), branch.proj_w, branch.proj_b)
    for layer in branch.layers:
        H = st_gnn_layer(g, H, layer)
    return H


def sequence_representation(H: Tensor, agent_rows: np.ndarray, w_a: Tensor) -> Tensor:
    """Per-agent attention summary over its K observations.

    ``agent_rows[i, t]`` indexes agent ``i``'s node at window time ``t``;
    the temporal encoding uses ``t`` counted from the window start.
    """
    A, K = agent_rows.shape
    if K == 0:
        raise ValueError("sequence representation needs at least one observation")
    d = H.shape[1]
    h = T.take_rows(H, agent_rows.reshape(-1)).reshape(A, K, d) + temporal_encoding(np.arange(K), d)
    a = T.tanh(h.mean(axis=1) @ w_a)
    score = T.tanh((h * a.reshape(A, 1, d)).sum(axis=2))
    return (h * score.reshape(A, K, 1)).mean(axis=1)


def initial_state_posterior(m: Tensor, f_trans: Mlp2, noise: np.ndarray | None = None):
    """Posterior mean, std and a reparameterized sample ``mu + sigma * noise``.

    ``noise=None`` returns the mean as the sample.
    """
    out = f_trans(m)
    d = out.shape[-1] // 2
    mu = out[..., :d]
    sigma = T.softplus(out[..., d:]) + SIGMA_FLOOR
    z = mu if noise is None else mu + sigma * noise
    return mu, sigma, z


def environment_embedding(m: Tensor, w_b: Tensor, agent_sample: np.ndarray | None = None,
                          n_samples: int = 1) -> Tensor:
    """Pool agent summaries ``m`` into one vector per sample, shape (S, d)."""
    A, d = m.shape
    if A == 0:
        raise ValueError("environment embedding needs at least one agent")
    if agent_sample is None:
        agent_sample = np.zeros(A, dtype=np.int64)
    counts = np.bincount(agent_sample, minlength=n_samples).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every sample needs at least one agent")
    inv = (1.0 / counts).reshape(-1, 1)
    m_bar = T.segment_sum(m, agent_sample, n_samples) * inv
    b = T.tanh(m_bar @ w_b)
    score = T.tanh((m * T.take_rows(b, agent_sample)).sum(axis=1))
    return T.segment_sum(m * score.reshape(-1, 1), agent_sample, n_samples) * inv


def encode(graph, params: EncoderParams, noise: np.ndarray | None = None, need_state: bool = True,
           zero_env: bool = False):
    """Run both encoders on a graph batch.

    Returns ``(mu, sigma, z0, u)`` with per-agent rows for the first three and
    one row per sample for ``u``; the state outputs are ``None`` when
    ``need_state`` is false.
    """
    g = _as_batch(graph)
    mu = sigma = z0 = None
    if need_state:
        H = encode_nodes(g, params.state)
        m = sequence_representation(H, g.agent_rows, params.state.w_a)
        mu, sigma, z0 = initial_state_posterior(m, params.f_trans, noise)
    if zero_env:
        u = Tensor(np.zeros((g.n_samples, params.w_b.shape[0])))
    else:
        He = encode_nodes(g, params.env)
        me = sequence_representation(He, g.agent_rows, params.env.w_a)
        u = environment_embedding(me, params.w_b, g.agent_sample, g.n_samples)
    return mu, sigma, z0, u
