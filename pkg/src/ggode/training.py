"""Data splitting, Adam, the end-to-end training loop and rollout evaluation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import (LossWeights, PairSamplingError, contrastive_loss, mi_from_scores, sample_contrastive_pairs,
                     sample_mi_pairs, total_loss)
from .model import GGODE, PreparedData
from .tensor import NumericError, Rng, Tensor

log = logging.getLogger(__name__)


# -- splitting ------------------------------------------------------------------------

@dataclass
class SplitConfig:
    obs_len: int = 20
    pred_len: int = 50
    interval: int = 10
    inductive_env_fraction: float = 0.2
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if min(self.obs_len, self.pred_len, self.interval) < 1:
            raise ValueError("obs_len, pred_len and interval must be >= 1")
        if abs(self.train_fraction + self.val_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError("train/val/test fractions must sum to 1")


@dataclass(frozen=True)
class Sample:
    """Observed frames ``[offset, offset+obs_len)`` then targets for ``pred_len`` frames."""

    traj: int
    offset: int
    obs_len: int
    pred_len: int
    env: int

    @property
    def span(self) -> int:
        return self.obs_len + self.pred_len

    def unit(self) -> tuple[int, int, int, int]:
        return (self.traj, self.offset, self.span, self.env)


def num_chunks(T_len: int, obs_len: int, pred_len: int, interval: int) -> int:
    sample_length = obs_len + pred_len
    if T_len < sample_length:
        return 0
    return (T_len - sample_length) // interval + 1


def chunk_split(T_len: int, cfg: SplitConfig, traj: int = 0, env: int = -1) -> list[Sample]:
    """Overlapping chunks of one trajectory; chunk ``j`` starts at ``j * interval``."""
    n = num_chunks(T_len, cfg.obs_len, cfg.pred_len, cfg.interval)
    if n == 0:
        warnings.warn(f"trajectory {traj} of length {T_len} is shorter than obs_len + pred_len "
                      f"= {cfg.obs_len + cfg.pred_len}; no samples produced", stacklevel=2)
    return [Sample(traj, j * cfg.interval, cfg.obs_len, cfg.pred_len, env) for j in range(n)]


def env_split(traj_envs: Sequence[int], cfg: SplitConfig, rng: Rng) -> dict[str, list[int]]:
    """Partition trajectory ids into train / val / test_trans / test_induct.

    A random ``inductive_env_fraction`` of environments is held out entirely
    for the inductive test set; the remaining trajectories are shuffled and
    split by the train/val/test fractions.
    """
    traj_envs = np.asarray(traj_envs)
    envs = np.unique(traj_envs)
    n_induct = int(math.floor(cfg.inductive_env_fraction * len(envs) + 0.5))
    if n_induct < 1 or n_induct >= len(envs):
        raise ValueError(f"{len(envs)} environments are too few for an inductive fraction of "
                         f"{cfg.inductive_env_fraction}")
    held = set(rng.permutation(envs)[:n_induct].tolist())
    induct = [int(k) for k in np.nonzero(np.isin(traj_envs, list(held)))[0]]
    rest = rng.permutation(np.nonzero(~np.isin(traj_envs, list(held)))[0]).tolist()
    n_train = int(math.floor(cfg.train_fraction * len(rest) + 0.5))
    n_val = int(math.floor(cfg.val_fraction * len(rest) + 0.5))
    return {"train": sorted(rest[:n_train]), "val": sorted(rest[n_train:n_train + n_val]),
            "test_trans": sorted(rest[n_train + n_val:]), "test_induct": sorted(induct)}


def make_samples(data_lengths: Sequence[int], traj_envs: Sequence[int], traj_ids: Sequence[int],
                 cfg: SplitConfig) -> list[Sample]:
    out = []
    for k in traj_ids:
        out.extend(chunk_split(int(data_lengths[k]), cfg, traj=int(k), env=int(traj_envs[k])))
    return out


# -- optimizer -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam update; mutates ``state`` and returns new values."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.005):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.state = [AdamState(np.zeros(p.shape), np.zeros(p.shape)) for p in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.state):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            p.data = adam_step(p.data, g, s, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 32
    epochs: int = 100
    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 0.05
    n_negatives: int = 8
    seed: int = 0
    deterministic: bool = True
    disable_contra: bool = False
    disable_mi: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def weights(self) -> LossWeights:
        return LossWeights(0.0 if self.disable_contra else self.lambda1,
                           0.0 if self.disable_mi else self.lambda2, self.tau)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class StepTerms:
    elbo: float
    recon: float
    kl: float
    contra: float
    mi: float
    total: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


class Trainer:
    """Runs the two-phase step: one discriminator ascent step on the MI bound,
    then an encoder/ODE/decoder step on the total loss with the discriminator
    held fixed."""

    def __init__(self, model: GGODE, data: PreparedData, train_samples: Sequence[Sample], cfg: TrainConfig):
        if not train_samples:
            raise ValueError("empty training split")
        self.model = model
        self.data = data
        self.samples = list(train_samples)
        self.cfg = cfg
        self.weights = cfg.weights()
        self.opt = Adam(model.model_parameters(), cfg.lr)
        self.psi_opt = Adam(model.psi.parameters(), cfg.lr)
        self.units = [s.unit() for s in self.samples]
        self._warned: set[str] = set()
        env_only = model.config.zero_env
        self.use_contra = self.weights.lambda1 > 0 and not env_only
        self.use_mi = self.weights.lambda2 > 0 and not env_only

    def _warn_once(self, key: str, msg: str) -> None:
        if key not in self._warned:
            self._warned.add(key)
            warnings.warn(msg, stacklevel=3)

    def loss_terms(self, batch_samples: Sequence[Sample], rng: Rng, update_psi: bool = False) -> dict:
        """Loss tensors for one batch: ``elbo, recon, kl, contra, mi, total``.

        With ``update_psi`` the discriminator takes its ascent step before the
        MI term is evaluated; otherwise the discriminator is left untouched.
        """
        model, cfg = self.model, self.cfg
        d = model.config.d
        n_agents = sum(self.data.records[s.traj].n_agents for s in batch_samples)
        noise = rng.child(0).normal((n_agents, d))
        recon, kl, z0, u, gbatch = model.elbo(self.data, batch_samples, noise)
        elbo = recon + kl
        contra = Tensor(0.0)
        mi = Tensor(0.0)
        extra_u, extra_env = None, None

        if self.use_contra:
            try:
                triples = sample_contrastive_pairs(self.units, batch_samples[0].obs_len, rng.child(1),
                                                   cfg.n_negatives, anchors=[s.unit() for s in batch_samples])
            except PairSamplingError as exc:
                self._warn_once("contra", f"contrastive term skipped: {exc}")
                triples = None
            if triples:
                windows = []
                for tr in triples:
                    windows.append(tr.anchor)
                    windows.append(tr.positive)
                    windows.extend(tr.negatives)
                wb = self.data.graph_batch([(w.traj, w.start, w.length) for w in windows])
                _, _, _, uw = model.encode(wb, need_state=False)
                per = 2 + cfg.n_negatives
                B = len(triples)
                base = np.arange(B) * per
                u_anchor = T.take_rows(uw, base)
                u_pos = T.take_rows(uw, base + 1)
                u_negs = T.take_rows(uw, (base[:, None] + 2 + np.arange(cfg.n_negatives)).reshape(-1))
                contra = contrastive_loss(u_anchor, u_pos, u_negs.reshape(B, cfg.n_negatives, d), self.weights.tau)
                extra_u = uw
                extra_env = np.array([w.env for w in windows])

        if self.use_mi:
            sample_env = np.array([s.env for s in batch_samples])
            cand_u = u if extra_u is None else T.concat([u, extra_u], axis=0)
            cand_env = sample_env if extra_env is None else np.concatenate([sample_env, extra_env])
            try:
                neg_idx = sample_mi_pairs(sample_env, cand_env, rng.child(2))
            except PairSamplingError as exc:
                self._warn_once("mi", f"mutual-information term skipped: {exc}")
                neg_idx = None
            if neg_idx is not None:
                owner = gbatch.agent_sample
                u_same = T.take_rows(u, owner)
                u_other = T.take_rows(cand_u, neg_idx[owner])
                if update_psi:
                    # phase 1: tighten the bound with encoder outputs held fixed
                    self.psi_opt.zero_grad()
                    bound = mi_from_scores(model.psi(z0.detach(), u_same.detach()),
                                           model.psi(z0.detach(), u_other.detach()))
                    (-bound).backward()
                    self.psi_opt.step()
                    self.psi_opt.zero_grad()
                # phase 2: encoders minimize the bound under the frozen discriminator
                psi_params = model.psi.parameters()
                for p in psi_params:
                    p.requires_grad = False
                try:
                    mi = mi_from_scores(model.psi(z0, u_same), model.psi(z0, u_other))
                finally:
                    for p in psi_params:
                        p.requires_grad = True

        return {"elbo": elbo, "recon": recon, "kl": kl, "contra": contra, "mi": mi,
                "total": total_loss(elbo, contra, mi, self.weights)}

    def step(self, batch_samples: Sequence[Sample], rng: Rng) -> StepTerms:
        terms = self.loss_terms(batch_samples, rng, update_psi=True)
        self.opt.zero_grad()
        terms["total"].backward()
        self.opt.step()
        T.check_finite(self.model.parameters(), "after optimizer step")
        return StepTerms(**{k: float(v.data) for k, v in terms.items()})

    def epoch(self, epoch: int) -> dict:
        rng = Rng(self.cfg.seed).child(1000 + epoch)
        order = rng.child(0).permutation(len(self.samples))
        bs = self.cfg.batch_size
        terms = []
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [self.samples[i] for i in order[start:start + bs]]
            terms.append((len(batch), self.step(batch, rng.child(1, b))))
        n = sum(k for k, _ in terms)
        out = {"epoch": epoch}
        for key in ("elbo", "recon", "kl", "contra", "mi", "total"):
            out[key] = sum(k * getattr(t, key) for k, t in terms) / n
        return out


def validation_elbo(model: GGODE, data: PreparedData, samples: Sequence[Sample], batch_size: int = 64) -> float:
    """Mean per-sample ELBO using posterior means (no sampling noise)."""
    if not samples:
        return math.nan
    total = 0.0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = list(samples[start:start + batch_size])
            recon, kl, *_ = model.elbo(data, chunk, None)
            total += float((recon + kl).data) * len(chunk)
    return total / len(samples)


def train(model: GGODE, data: PreparedData, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize the total loss; keep the parameters with the lowest validation ELBO."""
    trainer = Trainer(model, data, train_samples, cfg)
    result = TrainResult()
    best = model.state_arrays()
    for epoch in range(1, cfg.epochs + 1):
        row = trainer.epoch(epoch)
        row["val_elbo"] = validation_elbo(model, data, val_samples) if val_samples else math.nan
        if not math.isfinite(row["total"]):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        score = row["val_elbo"] if val_samples else row["elbo"]
        if score < result.best_val:
            result.best_val, result.best_epoch = score, epoch
            best = model.state_arrays()
        result.history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    model.load_arrays(best)
    return result


# -- evaluation -----------------------------------------------------------------------------

def horizon_steps(n_future: int, pct: float) -> int:
    return max(1, math.ceil(pct * n_future / 100.0 - 1e-9))


def evaluate_rollout_mse(predict: Callable, records, obs_len: int,
                         percentages: Sequence[float] = (30, 60, 100)) -> dict:
    """Rollout MSE per horizon percentage.

    ``predict(record, obs_len)`` returns positions for every frame after the
    observed prefix, shape (T - obs_len, N, D). The MSE at ``p`` averages the
    squared position error over the first ``ceil(p% * (T - obs_len))``
    predicted frames, all agents and dimensions, then over trajectories.
    """
    records = list(records)
    per = {p: [] for p in percentages}
    for r in records:
        if r.n_steps < obs_len + 1:
            raise ValueError(f"trajectory of length {r.n_steps} too short for obs_len={obs_len}")
    if hasattr(predict, "many"):
        preds = predict.many(records, obs_len)
    else:
        preds = [predict(r, obs_len) for r in records]
    for r, pred in zip(records, preds):
        truth = r.positions[obs_len:]
        pred = np.asarray(pred)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {truth.shape}")
        err = (pred - truth) ** 2
        for p in percentages:
            per[p].append(float(err[:horizon_steps(len(truth), p)].mean()))
    return {p: float(np.mean(v)) if v else math.nan for p, v in per.items()}


class ModelPredictor:
    """Adapter exposing a trained model to :func:`evaluate_rollout_mse`."""

    def __init__(self, model: GGODE, stats):
        self.model = model
        self.stats = stats

    def __call__(self, record, obs_len: int) -> np.ndarray:
        return self.model.predict(record, obs_len, self.stats)

    def many(self, records, obs_len: int) -> list[np.ndarray]:
        return self.model.predict_many(records, obs_len, self.stats)


def model_predictor(model: GGODE, stats) -> ModelPredictor:
    return ModelPredictor(model, stats)


def oracle_predictor(record, obs_len: int) -> np.ndarray:
    return record.positions[obs_len:].copy()


def last_position_predictor(record, obs_len: int) -> np.ndarray:
    n = record.n_steps - obs_len
    return np.repeat(record.positions[obs_len - 1][None], n, axis=0)


def export_embeddings(model: GGODE, records, stats, cfg: SplitConfig) -> tuple[np.ndarray, np.ndarray]:
    """Environment embeddings of every chunk window's observed part.

    Returns ``(env_ids, U)`` with one row per sample in trajectory order.
    """
    envs, rows = [], []
    for k, r in enumerate(records):
        for s in chunk_split(r.n_steps, cfg, traj=k, env=r.env_id):
            envs.append(r.env_id)
            rows.append(model.embed(r, s.offset, s.obs_len, stats))
    U = np.array(rows) if rows else np.zeros((0, model.config.d))
    return np.array(envs, dtype=np.int64), U


def config_dict(cfg) -> dict:
    return asdict(cfg)
