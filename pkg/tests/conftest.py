import numpy as np
import pytest

from ggode.datagen import EnvironmentSpec, fit_zscore, generate_dataset
from ggode.model import GGODE, ModelConfig, PreparedData
from ggode.tensor import Rng


def toy_records(n_envs=2, trajs=4, agents=3, steps=12, seed=0, stride=20):
    envs = [EnvironmentSpec(e, "lennard_jones", temperature=0.5 + 0.5 * e, box=(4.0, 4.0),
                            boundary="reflective", damping=0.3 * e) for e in range(n_envs)]
    return generate_dataset(envs, trajs, agents, steps, 0.005, seed=seed, stride=stride)


def toy_model(records, d=8, hidden=8, seed=0, radius=1.5, **kw):
    stats = fit_zscore(records)
    cfg = ModelConfig(n_features=6, out_dim=2, radius=radius, d=d, n_layers=kw.pop("n_layers", 1),
                      trans_hidden=hidden, ode_hidden=hidden, psi_hidden=hidden, psi_out=hidden,
                      substeps=kw.pop("substeps", 2), **kw)
    return GGODE.init(cfg, Rng(seed).child(5), stats), PreparedData(records, stats, radius)


@pytest.fixture(scope="session")
def toy():
    return toy_records()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
