"""Multi-environment ground-truth trajectories.

Two simulators are provided: Lennard-Jones molecular dynamics in reduced
units (epsilon = sigma = mass = 1) integrated with velocity Verlet, and a
2-D box with gravity, short-range repulsion and reflecting ramps. Features
follow the position-difference convention: ``v_t = p_t - p_{t-1}`` and
``a_t = p_t - 2 p_{t-1} + p_{t-2}``, not divided by the time step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import FormatError, read_container, write_container
from .tensor import Rng

LJ_CUTOFF = 2.5
MIN_INIT_DISTANCE = 0.5
STD_FLOOR = 1e-8

# ramp_box particle interaction (WCA-style repulsion) in box units
RAMP_SIGMA = 0.03
RAMP_EPSILON = 0.05

KINDS = ("lennard_jones", "ramp_box")
BOUNDARIES = ("periodic", "reflective")


@dataclass
class EnvironmentSpec:
    env_id: int
    kind: str
    temperature: float = 1.0
    ramp_segments: list = field(default_factory=list)
    box: tuple = (5.04, 5.04, 5.04)
    boundary: str = "periodic"
    damping: float = 0.0
    gravity: float = 1.0

    def __post_init__(self):
        self.box = tuple(float(b) for b in self.box)
        self.ramp_segments = [[list(map(float, a)), list(map(float, b))] for a, b in self.ramp_segments]

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if any(b <= 0 for b in self.box):
            raise ValueError("box extents must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.kind == "lennard_jones" and self.temperature <= 0:
            raise ValueError("lennard_jones environments need temperature > 0")
        if self.kind == "ramp_box":
            if len(self.box) != 2:
                raise ValueError("ramp_box environments are 2-D")
            for a, b in self.ramp_segments:
                if np.allclose(a, b):
                    raise ValueError(f"degenerate ramp segment {a} -> {b}")
                for pt in (a, b):
                    if not all(0.0 <= c <= ext for c, ext in zip(pt, self.box)):
                        raise ValueError(f"ramp endpoint {pt} outside the box")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        if self.kind == "lennard_jones":
            d.pop("ramp_segments")
            d.pop("gravity")
        else:
            d.pop("temperature")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        return cls(**d)


@dataclass
class TrajectoryRecord:
    env_id: int
    dt: float
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def features(self) -> np.ndarray:
        """Per-node input features ``[p, v, a]`` with shape (T, N, 3D)."""
        return np.concatenate([self.positions, self.velocities, self.accelerations], axis=-1)

    @classmethod
    def from_positions(cls, env_id: int, dt: float, positions: np.ndarray) -> "TrajectoryRecord":
        positions = np.asarray(positions, dtype=np.float64)
        vel, acc = finite_difference_features(positions)
        times = np.arange(positions.shape[0]) * dt
        return cls(env_id, float(dt), times, positions, vel, acc)


# -- Lennard-Jones -------------------------------------------------------------

class LJSystem:
    """Velocity Verlet integrator for a Lennard-Jones fluid in reduced units.

    The pair potential is truncated at ``LJ_CUTOFF`` and shifted so that the
    energy is continuous there. Positions are kept unwrapped; periodic images
    enter only through the minimum-image convention in the force.
    """

    def __init__(self, positions, velocities, box, boundary: str = "periodic",
                 damping: float = 0.0, cutoff: float = LJ_CUTOFF):
        self.x = np.array(positions, dtype=np.float64)
        self.v = np.array(velocities, dtype=np.float64)
        self.box = np.asarray(box, dtype=np.float64)
        self.boundary = boundary
        self.damping = damping
        self.cutoff = cutoff
        self._shift = 4.0 * (cutoff ** -12 - cutoff ** -6)
        self.f, self._pot = self._forces()

    def _displacements(self) -> np.ndarray:
        d = self.x[:, None, :] - self.x[None, :, :]
        if self.boundary == "periodic":
            d -= self.box * np.round(d / self.box)
        return d

    def _forces(self) -> tuple[np.ndarray, float]:
        d = self._displacements()
        r2 = np.einsum("ijk,ijk->ij", d, d)
        n = len(self.x)
        mask = (r2 < self.cutoff ** 2) & ~np.eye(n, dtype=bool)
        inv2 = np.where(mask, 1.0 / np.where(mask, r2, 1.0), 0.0)
        inv6 = inv2 ** 3
        inv12 = inv6 ** 2
        # F_ij = 24 (2 r^-12 - r^-6) / r^2 * d_ij
        coef = 24.0 * (2.0 * inv12 - inv6) * inv2
        forces = np.einsum("ij,ijk->ik", coef, d)
        pot = 0.5 * np.sum(np.where(mask, 4.0 * (inv12 - inv6) - self._shift, 0.0))
        return forces, float(pot)

    def kinetic(self) -> float:
        return 0.5 * float(np.sum(self.v ** 2))

    def potential(self) -> float:
        return self._pot

    def energy(self) -> float:
        return self.kinetic() + self._pot

    def momentum(self) -> np.ndarray:
        return self.v.sum(axis=0)

    def step(self, dt: float) -> None:
        if self.damping:
            self.v *= math.exp(-0.5 * self.damping * dt)
        self.v += 0.5 * dt * self.f
        self.x += dt * self.v
        if self.boundary == "reflective":
            _reflect_walls(self.x, self.v, self.box)
        self.f, self._pot = self._forces()
        self.v += 0.5 * dt * self.f
        if self.damping:
            self.v *= math.exp(-0.5 * self.damping * dt)


def _reflect_walls(x: np.ndarray, v: np.ndarray, box: np.ndarray) -> None:
    lo = x < 0.0
    x[lo] = -x[lo]
    v[lo] = -v[lo]
    hi = x > box
    x[hi] = (2.0 * box - x)[hi]
    v[hi] = -v[hi]


def _min_pair_distance(x: np.ndarray, box: np.ndarray, periodic: bool) -> float:
    if len(x) < 2:
        return math.inf
    d = x[:, None, :] - x[None, :, :]
    if periodic:
        d -= box * np.round(d / box)
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return float(r[np.triu_indices(len(x), 1)].min())


def lattice_positions(n: int, box, rng: Rng, jitter: float = 0.1, retries: int = 100) -> np.ndarray:
    """Random sites of a simple cubic lattice filling ``box``, slightly perturbed."""
    box = np.asarray(box, dtype=np.float64)
    dim = len(box)
    per_side = math.ceil(n ** (1.0 / dim) - 1e-9)
    spacing = box / per_side
    grid = np.stack(np.meshgrid(*[np.arange(per_side)] * dim, indexing="ij"), -1).reshape(-1, dim)
    for _ in range(retries):
        sites = grid[rng.choice(len(grid), n, replace=False)]
        x = (sites + 0.5) * spacing + rng.uniform(-jitter, jitter, (n, dim)) * spacing
        if _min_pair_distance(x, box, True) >= MIN_INIT_DISTANCE:
            return x
    raise RuntimeError(f"could not place {n} particles without overlap after {retries} retries")


def simulate_lj(env: EnvironmentSpec, n_particles: int, steps: int, dt: float, rng: Rng,
                stride: int = 1) -> TrajectoryRecord:
    """Run a Lennard-Jones trajectory and return ``steps`` recorded frames.

    Frames are ``stride`` integration steps apart. Initial velocities are
    Gaussian with per-component variance ``env.temperature``, with the
    centre-of-mass velocity removed.
    """
    if env.kind != "lennard_jones":
        raise ValueError("simulate_lj needs a lennard_jones environment")
    if dt <= 0:
        raise ValueError("dt must be positive")
    env.validate()
    box = np.asarray(env.box)
    x0 = lattice_positions(n_particles, box, rng)
    v0 = rng.normal((n_particles, len(box)), scale=math.sqrt(env.temperature))
    v0 -= v0.mean(axis=0)
    system = LJSystem(x0, v0, box, env.boundary, env.damping)
    frames = np.empty((steps, n_particles, len(box)))
    for k in range(steps):
        frames[k] = system.x
        if k + 1 < steps:
            for _ in range(stride):
                system.step(dt)
    return TrajectoryRecord.from_positions(env.env_id, dt * stride, frames)


# -- ramp box --------------------------------------------------------------------

def _segment_geometry(segments) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a = np.array([s[0] for s in segments], dtype=np.float64).reshape(-1, 2)
    b = np.array([s[1] for s in segments], dtype=np.float64).reshape(-1, 2)
    t = b - a
    length = np.linalg.norm(t, axis=1)
    if np.any(length == 0):
        raise ValueError("degenerate ramp segment")
    t = t / length[:, None]
    n = np.stack([-t[:, 1], t[:, 0]], axis=1)
    return a, t, n, length


def _repulsion(x: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - x[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    rc2 = (2.0 ** (1.0 / 6.0) * RAMP_SIGMA) ** 2
    mask = (r2 < rc2) & ~np.eye(len(x), dtype=bool)
    inv2 = np.where(mask, RAMP_SIGMA ** 2 / np.where(mask, r2, 1.0), 0.0)
    inv6 = inv2 ** 3
    coef = 24.0 * RAMP_EPSILON * (2.0 * inv6 ** 2 - inv6) * inv2 / RAMP_SIGMA ** 2
    return np.einsum("ij,ijk->ik", coef, d)


def _reflect_segments(x_old, x, v, geom) -> None:
    a, t, n, length = geom
    for k in range(len(a)):
        s_old = (x_old - a[k]) @ n[k]
        s_new = (x - a[k]) @ n[k]
        crossed = (s_old * s_new < 0) | ((s_new == 0) & (s_old != 0))
        if not crossed.any():
            continue
        frac = s_old / np.where(crossed, s_old - s_new, 1.0)
        hit = x_old + frac[:, None] * (x - x_old)
        along = (hit - a[k]) @ t[k]
        crossed &= (along >= 0) & (along <= length[k])
        if crossed.any():
            x[crossed] -= 2.0 * s_new[crossed, None] * n[k]
            v[crossed] -= 2.0 * (v[crossed] @ n[k])[:, None] * n[k]


def simulate_rampbox(env: EnvironmentSpec, n_particles: int, steps: int, dt: float, rng: Rng,
                     stride: int = 1, initial_positions=None, initial_velocities=None) -> TrajectoryRecord:
    """Particles falling under gravity in a 2-D box with reflecting ramps."""
    if env.kind != "ramp_box":
        raise ValueError("simulate_rampbox needs a ramp_box environment")
    if dt <= 0:
        raise ValueError("dt must be positive")
    env.validate()
    box = np.asarray(env.box)
    geom = _segment_geometry(env.ramp_segments) if env.ramp_segments else None
    if initial_positions is None:
        x = _rampbox_init(n_particles, box, rng)
    else:
        x = np.array(initial_positions, dtype=np.float64).reshape(n_particles, 2)
    v = (rng.normal((n_particles, 2), scale=math.sqrt(env.temperature) * 0.1)
         if initial_velocities is None else np.array(initial_velocities, dtype=np.float64).reshape(n_particles, 2))
    g = np.array([0.0, -env.gravity])
    acc = g + _repulsion(x)
    frames = np.empty((steps, n_particles, 2))
    for k in range(steps):
        frames[k] = x
        if k + 1 == steps:
            break
        for _ in range(stride):
            v_half = v + 0.5 * dt * acc
            if env.damping:
                v_half *= math.exp(-env.damping * dt)
            x_old = x
            x = x + dt * v_half
            if geom is not None:
                _reflect_segments(x_old, x, v_half, geom)
            _reflect_walls(x, v_half, box)
            np.clip(x, 0.0, box, out=x)
            acc = g + _repulsion(x)
            v = v_half + 0.5 * dt * acc
    return TrajectoryRecord.from_positions(env.env_id, dt * stride, frames)


def _rampbox_init(n: int, box: np.ndarray, rng: Rng, retries: int = 100) -> np.ndarray:
    lo = np.array([0.1, 0.6]) * box
    hi = np.array([0.9, 0.95]) * box
    for _ in range(retries):
        x = rng.uniform(lo, hi, (n, 2))
        if _min_pair_distance(x, box, False) >= RAMP_SIGMA:
            return x
    raise RuntimeError(f"could not place {n} particles without overlap after {retries} retries")


def random_ramp_env(env_id: int, rng: Rng, n_ramps: int | None = None, box=(1.0, 1.0)) -> EnvironmentSpec:
    """A ramp_box environment with 1-3 randomly placed, randomly tilted ramps."""
    box = np.asarray(box, dtype=np.float64)
    n_ramps = int(rng.integers(1, 4)) if n_ramps is None else n_ramps
    segs = []
    for _ in range(n_ramps):
        c = rng.uniform([0.2, 0.15], [0.8, 0.5]) * box
        half = rng.uniform(0.1, 0.25) * box[0]
        ang = rng.uniform(-0.5, 0.5)
        off = half * np.array([math.cos(ang), math.sin(ang)])
        a = np.clip(c - off, 0.0, box)
        b = np.clip(c + off, 0.0, box)
        segs.append([a.tolist(), b.tolist()])
    return EnvironmentSpec(env_id, "ramp_box", temperature=1.0, ramp_segments=segs, box=tuple(box),
                           boundary="reflective")


# -- features and normalization ---------------------------------------------------

def finite_difference_features(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Velocities and accelerations as position differences (not divided by dt).

    Rows without enough history are copied from the first defined row.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[0] < 3:
        raise ValueError(f"need at least 3 time steps, got {p.shape[0]}")
    v = np.empty_like(p)
    a = np.empty_like(p)
    v[1:] = p[1:] - p[:-1]
    v[0] = v[1]
    a[2:] = p[2:] - 2.0 * p[1:-1] + p[:-2]
    a[:2] = a[2]
    return v, a


@dataclass
class NormStats:
    """Per-channel z-score statistics; rows are (position, velocity, acceleration)."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros((3, dim)), np.ones((3, dim)))


def fit_zscore(records) -> NormStats:
    records = list(records)
    if not records:
        raise ValueError("cannot fit normalization on an empty dataset")
    means, stds = [], []
    for name in ("positions", "velocities", "accelerations"):
        pooled = np.concatenate([getattr(r, name).reshape(-1, r.dim) for r in records])
        means.append(pooled.mean(axis=0))
        stds.append(np.maximum(pooled.std(axis=0), STD_FLOOR))
    return NormStats(np.array(means), np.array(stds))


def apply_zscore(record: TrajectoryRecord, stats: NormStats) -> TrajectoryRecord:
    m, s = stats.mean, stats.std
    return replace(record,
                   positions=(record.positions - m[0]) / s[0],
                   velocities=(record.velocities - m[1]) / s[1],
                   accelerations=(record.accelerations - m[2]) / s[2])


def invert_zscore(record: TrajectoryRecord, stats: NormStats) -> TrajectoryRecord:
    m, s = stats.mean, stats.std
    return replace(record,
                   positions=record.positions * s[0] + m[0],
                   velocities=record.velocities * s[1] + m[1],
                   accelerations=record.accelerations * s[2] + m[2])


# -- persistence -------------------------------------------------------------------

def write_dataset(records, stats: NormStats | None, path) -> None:
    arrays = []
    entries = []
    for k, r in enumerate(records):
        names = {}
        for field_name in ("times", "positions", "velocities", "accelerations"):
            key = f"{k}/{field_name}"
            names[field_name] = key
            arrays.append((key, getattr(r, field_name)))
        entries.append({"env_id": int(r.env_id), "T": r.n_steps, "N": r.n_agents, "D": r.dim,
                        "dt": float(r.dt), "arrays": names})
    meta = {"record_count": len(entries), "records": entries,
            "stats": None if stats is None else stats.to_dict()}
    write_container(path, "dataset", arrays, meta)


def read_dataset(path) -> tuple[list[TrajectoryRecord], NormStats | None]:
    meta, arrays = read_container(path, kind="dataset")
    try:
        entries = meta["records"]
        if meta["record_count"] != len(entries):
            raise FormatError(f"{path}: record count mismatch")
        records = []
        for e in entries:
            a = {k: arrays[v] for k, v in e["arrays"].items()}
            if a["positions"].shape != (e["T"], e["N"], e["D"]):
                raise FormatError(f"{path}: record shape mismatch")
            records.append(TrajectoryRecord(int(e["env_id"]), float(e["dt"]), a["times"], a["positions"],
                                            a["velocities"], a["accelerations"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    stats = None if meta.get("stats") is None else NormStats.from_dict(meta["stats"])
    return records, stats


def write_catalog(envs, path) -> None:
    Path(path).write_text(json.dumps({str(e.env_id): e.to_dict() for e in envs}, indent=2, sort_keys=True))


def read_catalog(path) -> dict[int, EnvironmentSpec]:
    raw = json.loads(Path(path).read_text())
    return {int(k): EnvironmentSpec.from_dict(v) for k, v in raw.items()}


def generate_dataset(envs, trajs_per_env: int, n_particles: int, steps: int, dt: float,
                     seed: int, stride: int = 1) -> list[TrajectoryRecord]:
    """Simulate ``trajs_per_env`` records per environment.

    Record ``k`` of environment ``e`` draws from the stream ``(seed, e, k)``.
    """
    rng = Rng(seed)
    out = []
    for env in envs:
        sim = simulate_lj if env.kind == "lennard_jones" else simulate_rampbox
        for k in range(trajs_per_env):
            out.append(sim(env, n_particles, steps, dt, rng.child(env.env_id, k), stride=stride))
    return out
