"""Environment-conditioned graph ODE, fixed-step RK4 and the decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graph import grouped_radius_neighbors
from .tensor import Mlp2, Module, Rng, Tensor


class OdeFuncParams(Module):
    """ODE function and decoder weights plus the interaction radius.

    The decoder predicts normalized positions; ``pos_mean``/``pos_std`` map
    them back to simulation units before the radius test.
    """

    def __init__(self, f_env: Mlp2, f_e1: Mlp2, f_v1: Mlp2, f_e2: Mlp2, f_self: Mlp2, f_dec: Mlp2,
                 radius: float, pos_mean=None, pos_std=None):
        self.f_env, self.f_e1, self.f_v1, self.f_e2 = f_env, f_e1, f_v1, f_e2
        self.f_self, self.f_dec = f_self, f_dec
        d = f_env.n_out
        if not (f_e1.n_in == 2 * d and f_v1.n_in == d and f_e2.n_in == 2 * d and f_self.n_in == d
                and f_dec.n_in == d):
            raise ValueError("ODE function widths do not chain")
        self.radius = float(radius)
        D = f_dec.n_out
        self.pos_mean = np.zeros(D) if pos_mean is None else np.asarray(pos_mean, dtype=np.float64)
        self.pos_std = np.ones(D) if pos_std is None else np.asarray(pos_std, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.f_env.n_out

    @classmethod
    def init(cls, d: int, out_dim: int, radius: float, hidden: int = 64, rng: Rng | None = None,
             pos_mean=None, pos_std=None) -> "OdeFuncParams":
        rng = rng or Rng(0)
        return cls(Mlp2.init(2 * d, hidden, d, rng.child(1), "ode.f_env"),
                   Mlp2.init(2 * d, hidden, d, rng.child(2), "ode.f_e1"),
                   Mlp2.init(d, hidden, d, rng.child(3), "ode.f_v1"),
                   Mlp2.init(2 * d, hidden, d, rng.child(4), "ode.f_e2"),
                   Mlp2.init(d, hidden, d, rng.child(5), "ode.f_self"),
                   Mlp2.init(d, hidden, out_dim, rng.child(6), "ode.f_dec"),
                   radius, pos_mean, pos_std)


def decode(Z, params: OdeFuncParams) -> Tensor:
    """Row-wise decoder; its output is the predicted mean."""
    return params.f_dec(Z)


def _rows(u, n: int) -> Tensor:
    u = T.as_tensor(u)
    if u.ndim == 1:
        return u.reshape(1, -1) + np.zeros((n, 1))
    return u


class OdeFunc:
    """``dZ/dt`` for a fixed environment embedding.

    The neighbor graph is rebuilt from decoded positions by ``refresh`` and
    reused by every call until the next refresh. ``groups`` keeps agents of
    different samples in a batch from interacting.
    """

    def __init__(self, params: OdeFuncParams, u, groups: np.ndarray | None = None, n_agents: int | None = None):
        self.params = params
        self.groups = groups
        self.u_rows = u if n_agents is None else _rows(u, n_agents)
        self.src = self.dst = None

    def positions(self, Z) -> np.ndarray:
        with T.no_grad():
            y = decode(T.as_tensor(Z).detach(), self.params).data
        return y * self.params.pos_std + self.params.pos_mean

    def refresh(self, Z) -> None:
        p = self.positions(Z)
        groups = np.zeros(len(p), dtype=np.int64) if self.groups is None else self.groups
        pairs = grouped_radius_neighbors(p, self.params.radius, groups)
        self.src = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
        self.dst = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)

    def __call__(self, Z) -> Tensor:
        if self.src is None:
            self.refresh(Z)
        Z = T.as_tensor(Z)
        pr = self.params
        u_rows = self.u_rows if self.u_rows.shape[0] == Z.shape[0] else _rows(self.u_rows, Z.shape[0])
        zt = pr.f_env(T.concat([Z, u_rows], axis=1))
        n = Z.shape[0]
        if len(self.src):
            e = pr.f_e1(T.concat([T.take_rows(zt, self.src), T.take_rows(zt, self.dst)], axis=1))
            agg = T.segment_sum(e, self.dst, n)
        else:
            agg = Tensor(np.zeros((n, pr.d)))
        z1 = pr.f_v1(agg)
        z2 = pr.f_e2(T.concat([zt, z1], axis=1))
        return z2 + pr.f_self(zt)


def ode_derivative(Z, u, params: OdeFuncParams, groups: np.ndarray | None = None) -> Tensor:
    """Derivative with the neighbor graph built from the current decoded positions."""
    Z = T.as_tensor(Z)
    f = OdeFunc(params, _rows(u, Z.shape[0]), groups)
    f.refresh(Z)
    return f(Z)


def rk4_solve(f: Callable, z0, times: Sequence[float], substeps: int = 5,
              refresh: Callable | None = None) -> list:
    """Classical RK4 with ``substeps`` uniform steps between requested times.

    ``refresh(z)`` runs at the start of every internal step; stage
    evaluations within a step see the same refreshed state. Works on
    tensors, arrays and floats. Returns the state at every requested time.
    """
    times = np.asarray(times, dtype=np.float64)
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    z = z0
    path = [z]
    for t0, t1 in zip(times[:-1], times[1:]):
        h = (t1 - t0) / substeps
        for _ in range(substeps):
            if refresh is not None:
                refresh(z)
            k1 = f(z)
            k2 = f(z + k1 * (0.5 * h))
            k3 = f(z + k2 * (0.5 * h))
            k4 = f(z + k3 * h)
            z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        path.append(z)
    return path


@dataclass
class RolloutResult:
    times: np.ndarray
    Z_path: list = field(default_factory=list)
    Y_path: list = field(default_factory=list)

    def positions(self) -> np.ndarray:
        """Decoded path as an array of shape (len(times), N, D)."""
        return np.stack([y.data if isinstance(y, Tensor) else y for y in self.Y_path])


def rollout(params: OdeFuncParams, Z0, u, times, substeps: int = 5,
            groups: np.ndarray | None = None) -> RolloutResult:
    """Integrate from ``Z0`` at ``times[0]`` and decode at every requested time."""
    Z0 = T.as_tensor(Z0)
    f = OdeFunc(params, _rows(u, Z0.shape[0]), groups)
    Z_path = rk4_solve(f, Z0, times, substeps, refresh=f.refresh)
    return RolloutResult(np.asarray(times, dtype=np.float64), Z_path, [decode(z, params) for z in Z_path])
