import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ggode.container import FormatError
from ggode.datagen import (EnvironmentSpec, LJSystem, NormStats, TrajectoryRecord, apply_zscore,
                           finite_difference_features, fit_zscore, generate_dataset, invert_zscore, random_ramp_env,
                           read_catalog, read_dataset, simulate_lj, simulate_rampbox, write_catalog, write_dataset)
from ggode.tensor import Rng

R_MIN = 2.0 ** (1.0 / 6.0)


def lj_env(**kw):
    kw.setdefault("temperature", 1.0)
    return EnvironmentSpec(0, "lennard_jones", **kw)


# -- Lennard-Jones -----------------------------------------------------------------

def test_lj_pair_at_minimum_stays_put():
    x0 = np.array([[1.0, 1.0, 1.0], [1.0 + R_MIN, 1.0, 1.0]])
    sys_ = LJSystem(x0, np.zeros((2, 3)), (6.0, 6.0, 6.0))
    np.testing.assert_allclose(sys_.f, 0.0, atol=1e-12)
    for _ in range(500):
        sys_.step(0.005)
    np.testing.assert_allclose(sys_.x, x0, atol=1e-12)


def test_lj_zero_temperature_lattice_at_minimum_constant():
    # a periodic chain of two particles, every neighbour sitting at r_min
    box = (2 * R_MIN, 10.0, 10.0)
    x0 = np.array([[0.0, 5.0, 5.0], [R_MIN, 5.0, 5.0]])
    sys_ = LJSystem(x0, np.zeros((2, 3)), box)
    for _ in range(200):
        sys_.step(0.002)
    np.testing.assert_allclose(sys_.x, x0, atol=1e-10)


def test_lj_single_particle_straight_line():
    env = lj_env(box=(3.0, 3.0, 3.0))
    v0 = np.array([[0.3, -0.2, 0.7]])
    sys_ = LJSystem(np.array([[1.0, 1.0, 1.0]]), v0, env.box)
    for _ in range(100):
        sys_.step(0.01)
    np.testing.assert_allclose(sys_.x, [[1.0, 1.0, 1.0]] + 100 * 0.01 * v0, atol=1e-12)


def test_lj_energy_and_momentum_conservation():
    rng = Rng(0)
    env = lj_env(box=(4.0 * 1.26,) * 3)
    from ggode.datagen import lattice_positions
    x0 = lattice_positions(64, env.box, rng)
    v0 = rng.normal((64, 3))
    v0 -= v0.mean(axis=0)
    sys_ = LJSystem(x0, v0, env.box)
    e0 = sys_.energy()
    p_prev = sys_.momentum()
    worst = 0.0
    for _ in range(1000):
        sys_.step(0.001)
        p = sys_.momentum()
        worst = max(worst, float(np.abs(p - p_prev).max()))
        p_prev = p
    assert abs(sys_.energy() - e0) / abs(e0) < 1e-3
    assert worst < 1e-10


def test_lj_forces_equal_and_opposite():
    rng = Rng(1)
    sys_ = LJSystem(rng.uniform(0, 4, (10, 3)), np.zeros((10, 3)), (4.0, 4.0, 4.0))
    np.testing.assert_allclose(sys_.f.sum(axis=0), 0.0, atol=1e-8 * np.abs(sys_.f).max())


def test_simulate_lj_record_shape_and_spacing():
    rec = simulate_lj(lj_env(box=(5.04,) * 3), 27, 12, 0.002, Rng(3), stride=2)
    assert rec.positions.shape == (12, 27, 3)
    assert rec.dt == pytest.approx(0.004)
    assert np.all(np.diff(rec.times) > 0)
    d = rec.positions[0][:, None] - rec.positions[0][None]
    d -= 5.04 * np.round(d / 5.04)
    r = np.sqrt((d ** 2).sum(-1))[np.triu_indices(27, 1)]
    assert r.min() >= 0.5


def test_simulate_lj_errors():
    with pytest.raises(ValueError):
        simulate_lj(lj_env(), 8, 5, 0.0, Rng(0))
    with pytest.raises(ValueError):
        simulate_lj(EnvironmentSpec(0, "lennard_jones", temperature=-1.0), 8, 5, 0.01, Rng(0))
    with pytest.raises(RuntimeError):
        simulate_lj(lj_env(box=(1.0, 1.0, 1.0)), 64, 5, 0.01, Rng(0))


def test_damping_removes_kinetic_energy():
    env = EnvironmentSpec(0, "lennard_jones", temperature=1.0, box=(8.0, 8.0), boundary="reflective", damping=2.0)
    rec = simulate_lj(env, 4, 50, 0.01, Rng(2), stride=5)
    speed = np.abs(rec.velocities).mean(axis=(1, 2))
    assert speed[-1] < 0.5 * speed[2]


def test_reflective_box_contains_particles():
    env = EnvironmentSpec(0, "lennard_jones", temperature=2.0, box=(4.0, 4.0), boundary="reflective")
    rec = simulate_lj(env, 5, 200, 0.005, Rng(4), stride=4)
    assert rec.positions.min() >= 0.0 and rec.positions.max() <= 4.0


# -- ramp box ------------------------------------------------------------------------

def ramp_env(segments=(), **kw):
    return EnvironmentSpec(0, "ramp_box", ramp_segments=list(segments), box=(1.0, 1.0), boundary="reflective", **kw)


def test_rampbox_free_fall():
    dt, steps = 0.001, 300
    rec = simulate_rampbox(ramp_env(), 1, steps, dt, Rng(0), initial_positions=[[0.5, 0.9]],
                           initial_velocities=[[0.0, 0.0]])
    t = rec.times
    np.testing.assert_allclose(rec.positions[:, 0, 1], 0.9 - 0.5 * t ** 2, atol=dt ** 2)
    np.testing.assert_allclose(rec.positions[:, 0, 0], 0.5, atol=1e-15)


def test_rampbox_horizontal_ramp_blocks_particle():
    env = ramp_env([[[0.1, 0.5], [0.9, 0.5]]])
    rec = simulate_rampbox(env, 1, 2000, 0.001, Rng(0), initial_positions=[[0.5, 0.8]],
                           initial_velocities=[[0.0, 0.0]])
    assert rec.positions[:, 0, 1].min() >= 0.5


def test_rampbox_stays_in_box():
    env = random_ramp_env(0, Rng(1))
    rec = simulate_rampbox(env, 20, 200, 0.002, Rng(2), stride=2)
    assert rec.positions.min() >= 0.0 and rec.positions.max() <= 1.0


def test_rampbox_environments_diverge_after_contact():
    a = ramp_env([[[0.1, 0.5], [0.9, 0.5]]])
    b = ramp_env([[[0.1, 0.3], [0.9, 0.3]]])
    kw = dict(initial_positions=[[0.5, 0.8]], initial_velocities=[[0.0, 0.0]])
    ra = simulate_rampbox(a, 1, 1500, 0.001, Rng(0), **kw)
    rb = simulate_rampbox(b, 1, 1500, 0.001, Rng(0), **kw)
    first = np.argmax(ra.positions[:, 0, 1] <= 0.5 + 1e-3)
    assert first > 0
    np.testing.assert_array_equal(ra.positions[:first - 5], rb.positions[:first - 5])
    assert not np.allclose(ra.positions[-1], rb.positions[-1])


def test_rampbox_validation():
    with pytest.raises(ValueError):
        simulate_rampbox(ramp_env([[[0.3, 0.3], [0.3, 0.3]]]), 1, 5, 0.01, Rng(0))
    with pytest.raises(ValueError):
        ramp_env([[[0.3, 0.3], [1.5, 0.3]]]).validate()


def test_catalog_schema_per_kind(tmp_path):
    envs = [lj_env(), random_ramp_env(1, Rng(0))]
    write_catalog(envs, tmp_path / "cat.json")
    back = read_catalog(tmp_path / "cat.json")
    assert "ramp_segments" not in envs[0].to_dict()
    assert "temperature" not in envs[1].to_dict() and envs[1].to_dict()["ramp_segments"]
    assert back[1].ramp_segments == envs[1].ramp_segments


# -- features -----------------------------------------------------------------------

def test_features_constant_positions():
    v, a = finite_difference_features(np.ones((6, 2, 3)))
    assert not v.any() and not a.any()


def test_features_uniform_motion():
    c = np.array([0.5, -2.0])
    p = np.arange(7)[:, None, None] * c
    v, a = finite_difference_features(p)
    np.testing.assert_allclose(v[2:], np.broadcast_to(c, v[2:].shape))
    np.testing.assert_allclose(a[2:], 0.0)


def test_features_quadratic_hand_expansion():
    t = np.arange(8, dtype=float)
    v, a = finite_difference_features((t ** 2)[:, None, None])
    np.testing.assert_array_equal(v[2:, 0, 0], 2 * t[2:] - 1)
    np.testing.assert_array_equal(a[2:, 0, 0], 2.0)
    # rows without history copy the first defined row
    assert v[0, 0, 0] == v[1, 0, 0] and a[0, 0, 0] == a[1, 0, 0] == a[2, 0, 0]


def test_features_too_short():
    with pytest.raises(ValueError):
        finite_difference_features(np.zeros((2, 1, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2, 2), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (5, 2, 2), elements=st.floats(-1e3, 1e3)))
def test_features_linear(p, q):
    vp, ap = finite_difference_features(p)
    vq, aq = finite_difference_features(q)
    vs, as_ = finite_difference_features(p + q)
    np.testing.assert_allclose(vs, vp + vq, atol=1e-9)
    np.testing.assert_allclose(as_, ap + aq, atol=1e-9)


# -- normalization --------------------------------------------------------------------

def rec_from(pos):
    return TrajectoryRecord.from_positions(0, 0.1, pos)


def test_zscore_standardizes_pooled_channels():
    rng = Rng(0)
    recs = [rec_from(rng.normal((10, 4, 2)) * 3 + 7) for _ in range(3)]
    stats = fit_zscore(recs)
    out = [apply_zscore(r, stats) for r in recs]
    for name in ("positions", "velocities", "accelerations"):
        pooled = np.concatenate([getattr(r, name).reshape(-1, 2) for r in out])
        np.testing.assert_allclose(pooled.mean(0), 0.0, atol=1e-10)
        np.testing.assert_allclose(pooled.std(0), 1.0, atol=1e-10)


def test_zscore_hand_values_and_constant_channel():
    pos = np.zeros((4, 1, 2))
    pos[:, 0, 0] = [1, 3, 1, 3]
    pos[:, 0, 1] = 5.0
    stats = fit_zscore([rec_from(pos)])
    assert stats.mean[0, 0] == 2.0 and stats.std[0, 0] == 1.0
    assert stats.std[0, 1] == 1e-8
    out = apply_zscore(rec_from(pos), stats).positions
    np.testing.assert_array_equal(out[:, 0, 0], [-1, 1, -1, 1])
    np.testing.assert_array_equal(out[:, 0, 1], 0.0)


def test_zscore_roundtrip_and_empty():
    rng = Rng(1)
    r = rec_from(rng.normal((6, 3, 2)) * 5)
    stats = fit_zscore([r])
    back = invert_zscore(apply_zscore(r, stats), stats)
    np.testing.assert_allclose(back.positions, r.positions, atol=1e-12)
    np.testing.assert_allclose(back.accelerations, r.accelerations, atol=1e-12)
    with pytest.raises(ValueError):
        fit_zscore([])


def test_zscore_standard_normal_is_near_identity():
    stats = NormStats.identity(2)
    r = rec_from(Rng(0).normal((5, 2, 2)))
    np.testing.assert_array_equal(apply_zscore(r, stats).positions, r.positions)


# -- persistence ------------------------------------------------------------------------

def test_dataset_roundtrip_mixed_sizes(tmp_path):
    rng = Rng(0)
    recs = [rec_from(rng.normal((5, 3, 2))), TrajectoryRecord.from_positions(4, 0.2, rng.normal((7, 6, 3)))]
    stats = fit_zscore(recs[:1])
    write_dataset(recs, stats, tmp_path / "d.bin")
    back, bstats = read_dataset(tmp_path / "d.bin")
    assert [b.positions.shape for b in back] == [(5, 3, 2), (7, 6, 3)]
    for a, b in zip(recs, back):
        assert a.env_id == b.env_id and a.dt == b.dt
        for name in ("times", "positions", "velocities", "accelerations"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(bstats.std, stats.std)


def test_dataset_corrupt_magic(tmp_path):
    write_dataset([rec_from(np.zeros((3, 1, 1)))], None, tmp_path / "d.bin")
    blob = bytearray((tmp_path / "d.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "d.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d.bin")


def test_generate_dataset_streams_are_per_record():
    envs = [lj_env(box=(4.0, 4.0), boundary="reflective"), EnvironmentSpec(1, "lennard_jones", box=(4.0, 4.0),
                                                                            boundary="reflective")]
    a = generate_dataset(envs, 2, 4, 5, 0.005, seed=3)
    b = generate_dataset(envs[1:], 2, 4, 5, 0.005, seed=3)
    assert len(a) == 4 and [r.env_id for r in a] == [0, 0, 1, 1]
    np.testing.assert_array_equal(a[2].positions, b[0].positions)
    assert not np.array_equal(a[0].positions, a[1].positions)


def test_env_spec_validation():
    with pytest.raises(ValueError):
        EnvironmentSpec(0, "water").validate()
    with pytest.raises(ValueError):
        lj_env(boundary="open").validate()
    with pytest.raises(ValueError):
        lj_env(damping=-1.0).validate()
    assert EnvironmentSpec.from_dict(lj_env(damping=0.3).to_dict()) == lj_env(damping=0.3)
