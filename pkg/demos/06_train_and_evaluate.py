"""
Train on a few environments and test on unseen ones
===================================================

A scaled-down version of the multi-environment experiment: environments
are split into transductive and inductive groups, a model is trained
for a few epochs and rollout MSE is reported against a constant
baseline. Takes about a minute.
"""

from ggode.datagen import EnvironmentSpec, fit_zscore, generate_dataset
from ggode.model import GGODE, ModelConfig, PreparedData
from ggode.tensor import Rng
from ggode.training import (SplitConfig, TrainConfig, env_split, evaluate_rollout_mse, last_position_predictor,
                            make_samples, model_predictor, train)

envs = [EnvironmentSpec(e, "lennard_jones", temperature=0.5 + 0.25 * e, box=(4.0, 4.0),
                        boundary="reflective", damping=0.3 * e) for e in range(6)]
records = generate_dataset(envs, 6, 5, 18, 0.005, seed=0, stride=20)
sc = SplitConfig(obs_len=8, pred_len=10, interval=5)
parts = env_split([r.env_id for r in records], sc, Rng(0))
stats = fit_zscore([records[k] for k in parts["train"]])
data = PreparedData(records, stats, radius=1.5)
lengths = [r.n_steps for r in records]

model = GGODE.init(ModelConfig(n_features=6, out_dim=2, radius=1.5, d=16), Rng(0), stats)
result = train(model, data, make_samples(lengths, data.envs, parts["train"], sc),
               make_samples(lengths, data.envs, parts["val"], sc), TrainConfig(epochs=15, batch_size=8))
print(f"total loss: epoch 1 {result.history[0]['total']:.2f}, last {result.history[-1]['total']:.2f}")

for split in ("test_trans", "test_induct"):
    test = [records[k] for k in parts[split]]
    print(split, "model", evaluate_rollout_mse(model_predictor(model, stats), test, 8))
    print(split, "last position", evaluate_rollout_mse(last_position_predictor, test, 8))
