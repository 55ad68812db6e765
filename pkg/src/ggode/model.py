"""The assembled simulator: encoders, graph ODE, decoder and discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .container import FormatError, read_container, write_container
from .datagen import NormStats, TrajectoryRecord, apply_zscore
from .encoders import EncoderParams, encode
from .graph import GraphBatch, batch_graphs, build_temporal_graph
from .losses import Discriminator, kl_standard_normal, reconstruction_loss
from .ode import OdeFuncParams, rollout
from .tensor import Module, Rng, Tensor


@dataclass
class ModelConfig:
    n_features: int
    out_dim: int
    radius: float
    d: int = 64
    n_layers: int = 2
    trans_hidden: int = 128
    ode_hidden: int = 64
    psi_hidden: int = 128
    psi_out: int = 64
    substeps: int = 5
    shared_encoders: bool = False
    zero_env: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PreparedData:
    """Raw records plus their normalized features, with a window-graph cache.

    Graph connectivity uses raw positions; node features and regression
    targets are z-scored.
    """

    def __init__(self, records: list[TrajectoryRecord], stats: NormStats, radius: float):
        self.records = records
        self.stats = stats
        self.radius = float(radius)
        self.envs = np.array([r.env_id for r in records])
        norm = [apply_zscore(r, stats) for r in records]
        self.features = [n.features() for n in norm]
        self.targets = [n.positions for n in norm]
        self._graphs: dict = {}

    def __len__(self) -> int:
        return len(self.records)

    def graph(self, traj: int, start: int, length: int):
        key = (traj, start, length)
        g = self._graphs.get(key)
        if g is None:
            r = self.records[traj]
            window = TrajectoryRecord(r.env_id, r.dt, r.times[start:start + length],
                                      r.positions[start:start + length], r.velocities[start:start + length],
                                      r.accelerations[start:start + length])
            g = build_temporal_graph(window, self.radius, self.features[traj][start:start + length])
            self._graphs[key] = g
        return g

    def graph_batch(self, windows) -> GraphBatch:
        return batch_graphs([self.graph(*w) for w in windows])


class GGODE(Module):
    def __init__(self, config: ModelConfig, encoder: EncoderParams, ode: OdeFuncParams, psi: Discriminator):
        self.encoder = encoder
        self.ode = ode
        self.psi = psi
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng, stats: NormStats | None = None) -> "GGODE":
        c = config
        pos_mean = None if stats is None else stats.mean[0]
        pos_std = None if stats is None else stats.std[0]
        enc = EncoderParams.init(c.n_features, c.d, c.n_layers, c.trans_hidden, rng.child(10), c.shared_encoders)
        ode = OdeFuncParams.init(c.d, c.out_dim, c.radius, c.ode_hidden, rng.child(20), pos_mean, pos_std)
        psi = Discriminator.init(c.d, c.psi_hidden, c.psi_out, rng.child(30))
        return cls(c, enc, ode, psi)

    def model_parameters(self) -> list[Tensor]:
        """Everything except the discriminator."""
        psi_ids = {id(t) for t in self.psi.parameters()}
        return [t for t in self.parameters() if id(t) not in psi_ids]

    # -- forward pieces ---------------------------------------------------------
    def encode(self, batch: GraphBatch, noise=None, need_state: bool = True):
        return encode(batch, self.encoder, noise, need_state, self.config.zero_env)

    def solve(self, z0: Tensor, u: Tensor, batch: GraphBatch, n_future: int) -> Tensor:
        """Predicted normalized positions for the ``n_future`` steps after the window.

        The latent initial state sits at the last observed index; time is
        measured in observation steps. Returns shape (n_future, A, D).
        """
        K = batch.n_times
        times = np.arange(K - 1, K + n_future, dtype=np.float64)
        u_rows = T.take_rows(u, batch.agent_sample)
        res = rollout(self.ode, z0, u_rows, times, self.config.substeps, groups=batch.agent_sample)
        return self.ode.f_dec(T.stack(res.Z_path[1:], axis=0))

    def elbo(self, data: PreparedData, samples, noise=None):
        """Per-sample-averaged ELBO terms for a list of samples.

        Returns ``(recon, kl, z0, u, batch)``.
        """
        batch = data.graph_batch([(s.traj, s.offset, s.obs_len) for s in samples])
        mu, sigma, z0, u = self.encode(batch, noise)
        M = samples[0].pred_len
        y_pred = self.solve(z0, u, batch, M)
        y_true = np.concatenate([data.targets[s.traj][s.offset + s.obs_len:s.offset + s.obs_len + M]
                                 for s in samples], axis=1)
        scale = 1.0 / len(samples)
        return reconstruction_loss(y_pred, y_true) * scale, kl_standard_normal(mu, sigma) * scale, z0, u, batch

    # -- inference ----------------------------------------------------------------
    def predict(self, record: TrajectoryRecord, obs_len: int, stats: NormStats,
                n_future: int | None = None) -> np.ndarray:
        """Roll out from the first ``obs_len`` frames of a raw record.

        Returns raw-unit positions of shape (n_future, N, D), by default up to
        the end of the record. Uses the posterior mean as initial state.
        """
        n_future = record.n_steps - obs_len if n_future is None else n_future
        batch = self._window_batch(record, obs_len, stats)
        with T.no_grad():
            mu, _, _, u = self.encode(batch)
            y = self.solve(mu, u, batch, n_future).data
        return y * stats.std[0] + stats.mean[0]

    def predict_many(self, records, obs_len: int, stats: NormStats) -> list[np.ndarray]:
        """Batched :meth:`predict`; records of equal length share one solve."""
        out: list = [None] * len(records)
        groups: dict[int, list[int]] = {}
        for k, r in enumerate(records):
            groups.setdefault(r.n_steps, []).append(k)
        for T_len, idxs in groups.items():
            batch = batch_graphs([self._window_batch_graph(records[k], obs_len, stats) for k in idxs])
            with T.no_grad():
                mu, _, _, u = self.encode(batch)
                y = self.solve(mu, u, batch, T_len - obs_len).data * stats.std[0] + stats.mean[0]
            bounds = np.cumsum([records[k].n_agents for k in idxs])[:-1]
            for k, part in zip(idxs, np.split(y, bounds, axis=1)):
                out[k] = part
        return out

    def embed(self, record: TrajectoryRecord, start: int, length: int, stats: NormStats) -> np.ndarray:
        """Environment embedding of one raw window."""
        window = _slice(record, start, length)
        batch = self._window_batch(window, length, stats)
        with T.no_grad():
            _, _, _, u = self.encode(batch, need_state=False)
        return u.data[0]

    def _window_batch_graph(self, record: TrajectoryRecord, obs_len: int, stats: NormStats):
        if record.n_steps < obs_len or obs_len < 2:
            raise ValueError(f"need at least obs_len={obs_len} >= 2 frames, record has {record.n_steps}")
        window = _slice(record, 0, obs_len)
        feats = apply_zscore(window, stats).features()
        return build_temporal_graph(window, self.config.radius, feats)

    def _window_batch(self, record: TrajectoryRecord, obs_len: int, stats: NormStats) -> GraphBatch:
        return batch_graphs([self._window_batch_graph(record, obs_len, stats)])

    # -- persistence -----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays or arrays[name].shape != t.shape:
                raise FormatError(f"checkpoint lacks a matching array for {name}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path, stats: NormStats | None = None, extra: dict | None = None) -> None:
        meta = {"model_config": asdict(self.config), "stats": None if stats is None else stats.to_dict()}
        if extra:
            meta.update(extra)
        write_container(path, "checkpoint", list(self.state_arrays().items()), meta)

    @classmethod
    def load(cls, path) -> tuple["GGODE", NormStats | None, dict]:
        meta, arrays = read_container(path, kind="checkpoint")
        config = ModelConfig.from_dict(meta["model_config"])
        stats = None if meta.get("stats") is None else NormStats.from_dict(meta["stats"])
        model = cls.init(config, Rng(0), stats)
        model.load_arrays(arrays)
        return model, stats, meta


def _slice(record: TrajectoryRecord, start: int, length: int) -> TrajectoryRecord:
    sl = slice(start, start + length)
    return TrajectoryRecord(record.env_id, record.dt, record.times[sl], record.positions[sl],
                            record.velocities[sl], record.accelerations[sl])
