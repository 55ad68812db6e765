"""Training objectives: ELBO, contrastive time invariance, JSD mutual information."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Mlp2, Module, Rng, Tensor, init_matrix


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def kl_standard_normal(mu, sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over all entries."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    return ((s2 + mu * mu - 1.0 - T.log(s2)) * 0.5).sum()


def reconstruction_loss(y_pred, y_true) -> Tensor:
    """Unit-variance Gaussian NLL without constants: half the summed squared error."""
    diff = T.as_tensor(y_pred) - y_true
    return (diff * diff).sum() * 0.5


def elbo_loss(y_pred, y_true, mu, sigma) -> Tensor:
    return reconstruction_loss(y_pred, y_true) + kl_standard_normal(mu, sigma)


def cosine_similarity(a, b) -> Tensor:
    """Cosine along the last axis; zero vectors raise ``ValueError``."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    na2 = (a * a).sum(axis=-1)
    nb2 = (b * b).sum(axis=-1)
    if np.any(na2.data == 0) or np.any(nb2.data == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (a * b).sum(axis=-1) / T.sqrt(na2 * nb2)


def contrastive_loss(u_anchor, u_pos, u_negs, tau: float) -> Tensor:
    """``-log(exp(cos(a, p)/tau) / sum_neg exp(cos(a, n)/tau))``.

    The denominator holds only the negatives. Accepts a single anchor
    (``u_negs`` of shape (K', d)) or a batch (shape (B, K', d)); batches are
    averaged.
    """
    u_anchor, u_pos, u_negs = T.as_tensor(u_anchor), T.as_tensor(u_pos), T.as_tensor(u_negs)
    if u_negs.shape[-2] < 1:
        raise ValueError("contrastive loss needs at least one negative")
    single = u_anchor.ndim == 1
    if single:
        u_anchor, u_pos, u_negs = u_anchor.reshape(1, -1), u_pos.reshape(1, -1), u_negs.reshape((1,) + u_negs.shape)
    B, d = u_anchor.shape
    pos = cosine_similarity(u_anchor, u_pos) * (1.0 / tau)
    neg = cosine_similarity(u_anchor.reshape(B, 1, d), u_negs) * (1.0 / tau)
    loss = T.logsumexp(neg, axis=1) - pos
    return loss.mean()


class Discriminator(Module):
    """Score network on ``z || u``: Mlp2 (2d -> 128 -> 64), tanh, linear head."""

    def __init__(self, body: Mlp2, head_w: Tensor, head_b: Tensor):
        self.body = body
        self.head_w, self.head_b = head_w, head_b

    @classmethod
    def init(cls, d: int, hidden: int = 128, out: int = 64, rng: Rng | None = None) -> "Discriminator":
        rng = rng or Rng(0)
        return cls(Mlp2.init(2 * d, hidden, out, rng.child(1), "psi.body"),
                   init_matrix(out, 1, rng.child(2), "psi.head_w"),
                   Tensor(np.zeros(1), requires_grad=True, name="psi.head_b"))

    def __call__(self, z, u) -> Tensor:
        x = T.concat([T.as_tensor(z), T.as_tensor(u)], axis=-1)
        return T.linear(T.tanh(self.body(x)), self.head_w, self.head_b).reshape(-1)


def softplus_naive(w) -> np.ndarray:
    return np.log(1.0 + np.exp(np.asarray(w, dtype=np.float64)))


def mi_from_scores(pos_scores, neg_scores) -> Tensor:
    """JSD bound ``E_pos[-sp(-s)] - E_neg[sp(s)]`` from discriminator scores."""
    pos_scores, neg_scores = T.as_tensor(pos_scores), T.as_tensor(neg_scores)
    return (-T.softplus(-pos_scores)).mean() - T.softplus(neg_scores).mean()


def mi_loss(z, u_same, u_other, psi) -> Tensor:
    """Mutual-information estimate between initial states and environment embeddings.

    ``psi`` is any callable scoring ``(z, u)`` row pairs.
    """
    return mi_from_scores(psi(z, u_same), psi(z, u_other))


def total_loss(elbo, contra, mi, weights: LossWeights) -> Tensor:
    out = T.as_tensor(elbo)
    if weights.lambda1:
        out = out + T.as_tensor(contra) * weights.lambda1
    if weights.lambda2:
        out = out + T.as_tensor(mi) * weights.lambda2
    return out


# -- pair sampling ---------------------------------------------------------------

class PairSamplingError(ValueError):
    """No valid pairs can be built (e.g. only one environment present)."""


@dataclass(frozen=True)
class Window:
    """Observation window ``[start, start + length)`` of trajectory ``traj``."""

    traj: int
    start: int
    length: int
    env: int


@dataclass
class ContrastiveTriple:
    anchor: Window
    positive: Window
    negatives: list
    strategy: str


def _random_window(unit, length: int, rng: Rng) -> Window:
    traj, offset, span, env = unit
    if span < length:
        raise PairSamplingError(f"trajectory span {span} shorter than window {length}")
    start = offset + int(rng.integers(0, span - length + 1))
    return Window(traj, start, length, env)


def sample_contrastive_pairs(units, obs_len: int, rng: Rng, n_negatives: int = 8,
                             anchors=None, intra_fraction: float = 0.5) -> list[ContrastiveTriple]:
    """Positive and negative windows for the time-invariance loss.

    ``units`` are ``(traj_id, offset, span, env)`` tuples describing the
    training samples. Each anchor (default: every unit) yields one positive,
    either another window of the same unit ("intra") or a window of another
    unit from the same environment ("cross"), and ``n_negatives`` windows
    from randomly chosen other environments.
    """
    units = list(units)
    by_env: dict[int, list] = {}
    for u in units:
        by_env.setdefault(u[3], []).append(u)
    envs = sorted(by_env)
    if len(envs) < 2:
        raise PairSamplingError("contrastive pairs need at least two environments")
    anchors = units if anchors is None else list(anchors)
    out = []
    for unit in anchors:
        env = unit[3]
        anchor = _random_window(unit, obs_len, rng)
        same = [u for u in by_env[env] if u[:3] != unit[:3]]
        strategy = "intra" if (rng.uniform() < intra_fraction or not same) else "cross"
        src = unit if strategy == "intra" else same[int(rng.integers(0, len(same)))]
        positive = _random_window(src, obs_len, rng)
        others = [e for e in envs if e != env]
        negatives = []
        for _ in range(n_negatives):
            e2 = others[int(rng.integers(0, len(others)))]
            pool = by_env[e2]
            negatives.append(_random_window(pool[int(rng.integers(0, len(pool)))], obs_len, rng))
        out.append(ContrastiveTriple(anchor, positive, negatives, strategy))
    return out


def sample_mi_pairs(sample_envs, candidate_envs, rng: Rng) -> np.ndarray:
    """For every sample pick an embedding index from a different environment.

    The other environment is drawn uniformly, then one of its embeddings.
    Positives need no sampling: each agent pairs with its own sample's ``u``.
    """
    sample_envs = np.asarray(sample_envs)
    candidate_envs = np.asarray(candidate_envs)
    envs = np.unique(candidate_envs)
    idx_by_env = {int(e): np.nonzero(candidate_envs == e)[0] for e in envs}
    out = np.empty(len(sample_envs), dtype=np.int64)
    for s, e in enumerate(sample_envs):
        others = [int(x) for x in envs if x != e]
        if not others:
            raise PairSamplingError("mutual-information negatives need a second environment")
        pick = idx_by_env[others[int(rng.integers(0, len(others)))]]
        out[s] = pick[int(rng.integers(0, len(pick)))]
    return out
