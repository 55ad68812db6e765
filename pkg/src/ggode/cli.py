"""Command-line entry point: ``ggode <command> [flags]``.

Commands: gen-data, split, train, eval, rollout, export-embeddings.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .container import FormatError, write_container
from .datagen import (EnvironmentSpec, fit_zscore, generate_dataset, random_ramp_env, read_catalog, read_dataset,
                      write_catalog, write_dataset)
from .model import GGODE, ModelConfig, PreparedData
from .tensor import NumericError, Rng
from .training import (Sample, SplitConfig, TrainConfig, env_split, evaluate_rollout_mse, export_embeddings,
                       last_position_predictor, make_samples, model_predictor, oracle_predictor, train)

log = logging.getLogger("ggode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATASET_FILE = "dataset.bin"
CATALOG_FILE = "catalog.json"
DEFAULT_RADIUS = {"lennard_jones": 2.5, "ramp_box": 0.15}
KIND_ALIASES = {"lj": "lennard_jones", "lennard_jones": "lennard_jones", "ramp_box": "ramp_box"}
SPLIT_NAMES = {"trans": "test_trans", "induct": "test_induct"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers --------------------------------------------------------------------

def _dataset_path(path) -> Path:
    p = Path(path)
    return p / DATASET_FILE if p.is_dir() else p


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x).__name__}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_data(path):
    p = _dataset_path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {p}")
    records, _ = read_dataset(p)
    return p, records


def _catalog_for(data_path: Path) -> dict:
    cat = data_path.parent / CATALOG_FILE
    return read_catalog(cat) if cat.exists() else {}


def _float_text(x: float) -> str:
    return format(float(x), ".17g")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    kind = KIND_ALIASES.get(args.kind)
    if kind is None:
        raise UsageError(f"unknown --kind {args.kind!r}")
    if args.envs < 1 or args.trajs_per_env < 1 or args.particles < 1 or args.steps < 1:
        raise UsageError("--envs, --trajs-per-env, --particles and --steps must be >= 1")
    rng = Rng(args.seed).child(7)
    envs = []
    for e in range(args.envs):
        if kind == "lennard_jones":
            frac = e / max(args.envs - 1, 1)
            temp = args.temp_min + frac * (args.temp_max - args.temp_min)
            box = (args.box,) * args.dim
            envs.append(EnvironmentSpec(e, kind, temperature=temp, box=box, boundary=args.boundary,
                                        damping=frac * args.damping_max))
        else:
            envs.append(random_ramp_env(e, rng.child(e)))
    for env in envs:
        try:
            env.validate()
        except ValueError as exc:
            raise UsageError(f"invalid environment: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_dataset(envs, args.trajs_per_env, args.particles, args.steps, args.dt, args.seed,
                               stride=args.stride)
    write_dataset(records, None, out / DATASET_FILE)
    write_catalog(envs, out / CATALOG_FILE)
    print(f"wrote {len(records)} records from {len(envs)} environments to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    data_path, records = _load_data(args.data)
    try:
        cfg = SplitConfig(obs_len=args.obs_len, pred_len=args.pred_len, interval=args.interval,
                          inductive_env_fraction=args.inductive_frac)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lengths = [r.n_steps for r in records]
    envs = [r.env_id for r in records]
    if max(lengths) < cfg.obs_len + cfg.pred_len:
        raise DataError(f"no trajectory is long enough for obs_len + pred_len = {cfg.obs_len + cfg.pred_len}")
    try:
        parts = env_split(envs, cfg, Rng(args.seed))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    samples = {}
    for name in ("train", "val"):
        samples[name] = [[s.traj, s.offset] for s in make_samples(lengths, envs, parts[name], cfg)]
    manifest = {"data": str(data_path.resolve()), "data_sha256": _sha256(data_path), "seed": args.seed,
                "split_config": asdict(cfg), "trajectories": parts, "samples": samples}
    _write_json(args.out, manifest)
    counts = {k: len(v) for k, v in parts.items()}
    print(f"trajectories {counts}; samples train={len(samples['train'])} val={len(samples['val'])}")
    return EXIT_OK


def _check_manifest(manifest: dict, data_path: Path) -> None:
    if manifest.get("data_sha256") != _sha256(data_path):
        raise DataError(f"split manifest does not match dataset {data_path} (hash mismatch)")


def _samples_from_manifest(manifest: dict, records, name: str):
    cfg = SplitConfig(**manifest["split_config"])
    out = []
    for traj, offset in manifest["samples"][name]:
        if traj >= len(records):
            raise DataError(f"manifest references trajectory {traj}, dataset has {len(records)}")
        out.append(Sample(int(traj), int(offset), cfg.obs_len, cfg.pred_len, records[traj].env_id))
    return out


def _resolve_configs(raw: dict, records, data_path: Path, args) -> tuple[dict, dict]:
    known_model = {f.name for f in fields(ModelConfig)} - {"n_features", "out_dim"}
    known_train = {f.name for f in fields(TrainConfig)}
    model_raw = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    bad = (set(model_raw) - known_model) | (set(train_raw) - known_train) | (set(raw) - {"model", "train"})
    if bad:
        raise UsageError(f"unknown config keys: {sorted(bad)}")
    if "radius" not in model_raw:
        kinds = {e.kind for e in _catalog_for(data_path).values()}
        model_raw["radius"] = DEFAULT_RADIUS.get(kinds.pop(), 2.5) if len(kinds) == 1 else 2.5
    D = records[0].dim
    model_raw.update(n_features=3 * D, out_dim=D)
    if args.deterministic:
        train_raw["deterministic"] = True
    try:
        mc = ModelConfig.from_dict(model_raw)
        tc = TrainConfig.from_dict(train_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return asdict(mc), asdict(tc)


def cmd_train(args) -> int:
    data_path, records = _load_data(args.data)
    manifest = _read_json(args.splits)
    _check_manifest(manifest, data_path)
    raw = _read_json(args.config) if args.config else {}
    model_cfg, train_cfg = _resolve_configs(raw, records, data_path, args)
    run = Path(args.out_dir)
    run.mkdir(parents=True, exist_ok=True)
    # the resolved snapshot goes down before any heavy work
    _write_json(run / "config.json", {"data": str(data_path.resolve()), "splits": str(Path(args.splits).resolve()),
                                      "data_sha256": manifest["data_sha256"], "model": model_cfg,
                                      "train": train_cfg, "split_config": manifest["split_config"]})
    train_ids = manifest["trajectories"]["train"]
    stats = fit_zscore([records[k] for k in train_ids])
    mc, tc = ModelConfig.from_dict(model_cfg), TrainConfig.from_dict(train_cfg)
    data = PreparedData(records, stats, mc.radius)
    train_s = _samples_from_manifest(manifest, records, "train")
    val_s = _samples_from_manifest(manifest, records, "val")
    if not train_s:
        raise DataError("training split has no samples")
    model = GGODE.init(mc, Rng(tc.seed).child(5), stats)
    log_path = run / "loss_log.jsonl"
    with open(log_path, "w") as fh:
        def on_epoch(row):
            fh.write(json.dumps({k: row[k] for k in ("epoch", "elbo", "recon", "kl", "contra", "mi", "total",
                                                     "val_elbo")}) + "\n")
            fh.flush()
        result = train(model, data, train_s, val_s, tc, on_epoch)
    model.save(run / "checkpoint.bin", stats, {"best_epoch": result.best_epoch, "best_val_elbo": result.best_val})
    obs_len = manifest["split_config"]["obs_len"]
    predictor = model_predictor(model, stats)
    metrics = {}
    for label, key in (("transductive", "test_trans"), ("inductive", "test_induct")):
        recs = [records[k] for k in manifest["trajectories"][key] if records[k].n_steps > obs_len]
        metrics[label] = _mse_text(evaluate_rollout_mse(predictor, recs, obs_len)) if recs else None
    _write_json(run / "metrics.json", metrics)
    print(f"best epoch {result.best_epoch} (val ELBO {result.best_val:.6g}); metrics in {run / 'metrics.json'}")
    return EXIT_OK


def _mse_text(mse: dict) -> dict:
    return {str(int(p)): float(_float_text(v)) for p, v in mse.items()}


def _load_run(run_dir):
    run = Path(run_dir)
    cfg = _read_json(run / "config.json")
    ckpt = run / "checkpoint.bin"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}")
    model, stats, _ = GGODE.load(ckpt)
    return run, cfg, model, stats


def cmd_eval(args) -> int:
    run, cfg, model, stats = _load_run(args.run_dir)
    data_path, records = _load_data(cfg["data"])
    manifest = _read_json(cfg["splits"])
    _check_manifest(manifest, data_path)
    obs_len = args.obs_len or cfg["split_config"]["obs_len"]
    ids = manifest["trajectories"][SPLIT_NAMES[args.split]]
    recs = [records[k] for k in ids]
    if not recs:
        raise DataError(f"split {args.split} is empty")
    predictor = {"model": model_predictor(model, stats), "oracle": oracle_predictor,
                 "last": last_position_predictor}[args.predictor]
    try:
        mse = evaluate_rollout_mse(predictor, recs, obs_len)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = {"split": args.split, "obs_len": obs_len, "predictor": args.predictor, "mse": _mse_text(mse)}
    _write_json(run / f"eval_{args.split}.json", out)
    print(json.dumps(out["mse"]))
    return EXIT_OK


def cmd_rollout(args) -> int:
    run, cfg, model, stats = _load_run(args.run_dir)
    _, records = _load_data(cfg["data"])
    if not 0 <= args.traj_id < len(records):
        raise DataError(f"trajectory {args.traj_id} not in dataset of {len(records)}")
    rec = records[args.traj_id]
    obs_len = args.obs_len or cfg["split_config"]["obs_len"]
    if rec.n_steps <= obs_len:
        raise DataError(f"trajectory of length {rec.n_steps} too short for obs_len={obs_len}")
    pos = model.predict(rec, obs_len, stats)
    write_container(args.out, "rollout", [("times", rec.times[obs_len:]), ("positions", pos)],
                    {"traj_id": args.traj_id, "env_id": rec.env_id, "obs_len": obs_len, "T": rec.n_steps})
    print(f"wrote rollout of {pos.shape[0]} frames to {args.out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    run, cfg, model, stats = _load_run(args.run_dir)
    _, records = _load_data(args.data)
    env_ids, U = export_embeddings(model, records, stats, SplitConfig(**cfg["split_config"]))
    d = model.config.d
    with open(args.out, "w") as fh:
        fh.write(",".join(["env_id", "sample_id"] + [f"u_{j + 1}" for j in range(d)]) + "\n")
        for sid, (env, u) in enumerate(zip(env_ids, U)):
            fh.write(",".join([str(env), str(sid)] + [_float_text(x) for x in u]) + "\n")
    print(f"wrote {len(U)} embeddings to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads (default: $GGODE_THREADS or library default)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, ordered reductions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ggode", description="Generalized graph ODE simulator: data, training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="simulate a multi-environment dataset")
    g.add_argument("--kind", required=True, help="lj | ramp_box")
    g.add_argument("--envs", type=int, required=True)
    g.add_argument("--trajs-per-env", type=int, required=True)
    g.add_argument("--particles", type=int, default=64)
    g.add_argument("--steps", type=int, default=100, help="recorded frames per trajectory")
    g.add_argument("--dt", type=float, default=0.005, help="integration step")
    g.add_argument("--stride", type=int, default=1, help="integration steps between recorded frames")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dim", type=int, default=3, choices=(2, 3), help="LJ spatial dimension")
    g.add_argument("--box", type=float, default=5.04, help="LJ box edge length")
    g.add_argument("--boundary", default="periodic", choices=("periodic", "reflective"))
    g.add_argument("--temp-min", type=float, default=0.5)
    g.add_argument("--temp-max", type=float, default=1.5)
    g.add_argument("--damping-max", type=float, default=0.0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", parents=[common], help="chunk trajectories and partition environments")
    s.add_argument("--data", required=True)
    s.add_argument("--obs-len", type=int, default=20)
    s.add_argument("--pred-len", type=int, default=50)
    s.add_argument("--interval", type=int, default=10)
    s.add_argument("--inductive-frac", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="split manifest (JSON)")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", parents=[common], help="train a model and evaluate it")
    t.add_argument("--data", required=True)
    t.add_argument("--splits", required=True)
    t.add_argument("--config", default=None, help='JSON with optional "model" and "train" blocks')
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="rollout MSE on a test split")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--split", choices=sorted(SPLIT_NAMES), required=True)
    e.add_argument("--obs-len", type=int, default=None)
    e.add_argument("--predictor", choices=("model", "oracle", "last"), default="model",
                   help="swap in a reference predictor (oracle / last observed position)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", parents=[common], help="export one predicted trajectory")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--traj-id", type=int, required=True)
    r.add_argument("--obs-len", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    x = sub.add_parser("export-embeddings", parents=[common], help="environment embeddings as CSV")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def _thread_limit(args) -> int | None:
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("GGODE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"GGODE_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        n_threads = _thread_limit(args)
        if n_threads is not None and n_threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"ggode: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    limit = threadpool_limits(n_threads) if n_threads is not None else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        print(f"ggode: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ggode: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ggode: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
