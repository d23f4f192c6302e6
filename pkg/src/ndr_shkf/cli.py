"""Command-line entry point: ``ndr-shkf {simulate,train,eval,ablate,transfer,profile}``.

Configuration is a single YAML tree. A run starts from the built-in defaults,
applies an optional named preset (``--preset``), then a config file
(``--config``, which may also be a previous run's ``manifest.json``), then
dotted ``--set key.path=value`` overrides. Unknown keys are rejected.

Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 failed
``eval --check``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .errors import ConfigInvalid, NdrError, OffsetOutOfRange

log = logging.getLogger("ndr_shkf")

OUTPUT_ENV = "NDR_SHKF_OUT"
COMMANDS = ("simulate", "train", "eval", "ablate", "transfer", "profile")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _train_defaults() -> dict:
    from .train import TrainConfig

    out = {}
    for f in fields(TrainConfig):
        v = getattr(TrainConfig(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    del out["seed"]  # the top-level seed drives training
    return out


def defaults() -> dict:
    return {
        "seed": 0,
        "output": None,
        "system": {"name": "lorenz", "noise": None, "T": 600, "n_runs": 200, "init_sd": None,
                   "threshold": 100.0, "chunk": 200},
        "filters": {"shkf_b": [0.95, 0.99], "checkpoint": None},
        "train": _train_defaults(),
        "scenario": {"kinds": ["baseline", "transient", "sensor-denied"], "start": 4.0, "end": 6.0,
                     "factor": 2.0, "n_seeds": 1, "log_seconds": 10.0, "shkf_b": [0.995, 0.999]},
        "transfer": {"x_off": 0, "z_off": 0},
        "ablation": {"axis": "depth", "values": None, "n_seeds": 1, "n_runs": 200, "T": 600},
        "profile": {"n_steps": 10000, "depth": 3, "d_h": 32},
        "simulate": {"n_episodes": 10},
    }


PRESETS = {
    "lorenz-train": """
system: {name: lorenz, noise: train}
train:
  env: chaos
  epochs: 300
  batches_per_epoch: 16
  batch_size: 64
  seq_len: 60
  lr: 0.001
  grad_clip: 0.5
  lambda_aux: 0.1
  depth: 3
""",
    "rossler-eval": """
system: {name: rossler, noise: test, T: 600, n_runs: 200}
filters: {shkf_b: [0.95, 0.99]}
""",
    "uav-bench": """
system: {name: uav}
scenario:
  kinds: [baseline, transient, sensor-denied]
  start: 4.0
  end: 6.0
  factor: 2.0
  log_seconds: 10.0
  shkf_b: [0.995, 0.999]
train:
  env: uav
  epochs: 2200
  batches_per_epoch: 5
  batch_size: 128
  grad_clip: 0.1
  lambda_att: 10.0
  huber_delta: 5.0
  curriculum_lengths: [20, 50, 100, 200, 300]
  curriculum_starts: [0, 300, 600, 900, 2000]
  lr_fractions: [0.0, 0.4, 0.7, 0.9]
  lr_factors: [1.0, 0.5, 0.2, 0.1]
""",
    # desk-scale UAV training: same schedule shape, far fewer and shorter batches
    "uav-desk": """
system: {name: uav}
scenario:
  kinds: [baseline, transient, sensor-denied]
  start: 4.0
  end: 6.0
  factor: 2.0
  log_seconds: 10.0
  shkf_b: [0.995, 0.999]
train:
  env: uav
  epochs: 300
  batches_per_epoch: 2
  batch_size: 32
  grad_clip: 0.1
  lambda_att: 10.0
  huber_delta: 5.0
  uav_log_seconds: 10.0
  curriculum_lengths: [20, 50, 100]
  curriculum_starts: [0, 100, 200]
  lr_fractions: [0.0, 0.4, 0.7, 0.9]
  lr_factors: [1.0, 0.5, 0.2, 0.1]
""",
}


# --- config handling --------------------------------------------------------


def _merge(base: dict, new: dict, where: str = "") -> dict:
    for key, value in new.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigInvalid(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(base[key], value, path)
    return base


def _coerce(default, value, path):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{path!r} must be a boolean")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{path!r} must be a number")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{path!r} must be a list")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigInvalid(f"{path!r} must be a string")
    return value


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigInvalid(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse override value {raw!r}: {exc}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _load_yaml(text: str, source: str) -> dict:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{source}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{source}: top level must be a mapping")
    return data


def resolve_config(preset: str | None = None, path=None, overrides=()) -> dict:
    """Defaults, then preset, then file, then overrides; validated."""
    cfg = defaults()
    if preset:
        if preset not in PRESETS:
            raise ConfigInvalid(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(cfg, _load_yaml(PRESETS[preset], preset))
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        data = _load_yaml(text, str(path))
        if "config" in data and "artifacts" in data:  # a run manifest
            data = data["config"]
        _merge(cfg, data)
    for text in overrides:
        _merge(cfg, parse_override(text))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    from . import chaos
    from .bench import ABLATION_AXES, SCENARIOS

    if cfg["system"]["name"] not in (chaos.LORENZ, chaos.ROSSLER, "uav"):
        raise ConfigInvalid(f"unknown system {cfg['system']['name']!r}")
    if cfg["system"]["noise"] not in (None, "train", "test"):
        raise ConfigInvalid("system.noise must be train or test")
    if cfg["system"]["n_runs"] < 1 or cfg["system"]["T"] < 1:
        raise ConfigInvalid("system.n_runs and system.T must be >= 1")
    for k in cfg["scenario"]["kinds"]:
        if k not in SCENARIOS:
            raise ConfigInvalid(f"unknown scenario {k!r}")
    if cfg["ablation"]["axis"] not in ABLATION_AXES:
        raise ConfigInvalid(f"unknown ablation axis {cfg['ablation']['axis']!r}")
    for b in cfg["filters"]["shkf_b"] + cfg["scenario"]["shkf_b"]:
        if not 0.0 < b < 1.0:
            raise ConfigInvalid("forgetting factors must lie in (0, 1)")
    train_config(cfg)


def train_config(cfg: dict):
    from .train import TrainConfig

    try:
        return TrainConfig(**cfg["train"], seed=cfg["seed"])
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


# --- output and provenance --------------------------------------------------


def output_dir(cfg: dict, command: str, flag=None) -> Path:
    base = flag or cfg.get("output") or os.environ.get(OUTPUT_ENV) or "ndr_runs"
    out = Path(base) if (flag or cfg.get("output")) else Path(base) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, artifacts: list[Path], extra: dict | None = None) -> Path:
    from . import __version__

    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- subcommands ------------------------------------------------------------


def _load_policy(path):
    from . import policy as pol

    if not path:
        return None
    try:
        return pol.load_checkpoint(path)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_simulate(cfg, out: Path) -> tuple[list[Path], dict]:
    import numpy as np

    from . import chaos, uav

    sysc = cfg["system"]
    written = []
    if sysc["name"] == "uav":
        logs = uav.generate_flight_logs(uav.benchmark_maneuvers(), cfg["scenario"]["log_seconds"])
        for i, fl in enumerate(logs):
            p = out / f"flight_{i:02d}.csv"
            fl.to_csv(p)
            written.append(p)
        return written, {}
    params = chaos.ChaosParams(system=sysc["name"])
    noise = sysc["noise"] or ("train" if sysc["name"] == chaos.LORENZ else "test")
    ep = chaos.make_episodes(params, np.arange(cfg["simulate"]["n_episodes"]), sysc["T"], cfg["seed"], noise,
                             sysc["init_sd"], split=chaos.EVAL_SPLIT)
    for i in range(len(ep)):
        traj = chaos.Trajectory(ep.states[i], ep.measurements[i], ep.true_q[i], ep.outliers[i], ep.x0[i])
        p = out / f"episode_{i:05d}.csv"
        traj.to_csv(p)
        written.append(p)
    return written, {"ground_truth_escapes": int(ep.gt_diverged.sum())}


def cmd_train(cfg, out: Path) -> tuple[list[Path], dict]:
    from . import policy as pol
    from .train import train

    tc = train_config(cfg)
    init = _load_policy(cfg["filters"]["checkpoint"])
    log_path = out / "train_log.jsonl"
    res = train(tc, init.weights if init else None, log_path=log_path,
                checkpoint_dir=out / "checkpoints" if tc.checkpoint_every else None)
    ck = out / "policy"
    pol.save_checkpoint(ck, res.arch, res.features, res.weights, {"train": asdict(tc)})
    last = res.history[-1] if res.history else {}
    print(f"trained {tc.epochs} epochs; final loss {last.get('loss')}")
    return [log_path, ck.with_suffix(".json"), ck.with_suffix(".bin")], {}


def _chaos_results(cfg, ck, transfer=None):
    from . import bench, chaos
    from . import kalman as kf
    from .filter import NdrFilter

    sysc = cfg["system"]
    model = kf.ChaosModel(chaos.ChaosParams(system=sysc["name"]))
    policies = {}
    if ck is not None:
        policies["NDR-SHKF"] = NdrFilter(model, ck.weights, ck.arch, ck.features, transfer=transfer)
    filters = bench.chaos_filters(model, policies, tuple(cfg["filters"]["shkf_b"]))
    return bench.run_monte_carlo(filters, sysc["name"], sysc["n_runs"], sysc["T"], cfg["seed"], sysc["noise"],
                                 sysc["init_sd"], sysc["chunk"], sysc["threshold"])


def check_chaos(results, system: str) -> list[str]:
    """Ordering checks used by ``eval --check``; returns failure messages."""
    fails = []
    ndr = results.get("NDR-SHKF")
    if ndr is None:
        return ["--check needs a policy checkpoint (filters.checkpoint)"]
    if system == "lorenz":
        if not ndr.mean <= results["EKF"].mean:
            fails.append(f"Lorenz ARMSE {ndr.mean:.4f} > EKF {results['EKF'].mean:.4f}")
    else:
        for other in ("EKF", "SHKF99"):
            if other in results and not ndr.median < results[other].median:
                fails.append(f"median ARMSE {ndr.median:.4f} >= {other} {results[other].median:.4f}")
    return fails


def cmd_eval(cfg, out: Path, check: bool = False) -> tuple[list[Path], dict]:
    from . import bench

    ck = _load_policy(cfg["filters"]["checkpoint"])
    if cfg["system"]["name"] == "uav":
        return _eval_uav(cfg, out, ck, check)
    results = _chaos_results(cfg, ck)
    print(bench.results_table(results, f"{cfg['system']['name']} ({cfg['system']['n_runs']} runs)"))
    paths = [out / "results.csv", out / "runs.jsonl", out / "crmse.csv"]
    bench.write_results_csv(paths[0], [r.row() for r in results.values()])
    bench.write_records_jsonl(paths[1], results)
    bench.write_crmse_csv(paths[2], results)
    fails = check_chaos(results, cfg["system"]["name"]) if check else []
    return paths, {"check_failures": fails}


def _eval_uav(cfg, out, ck, check):
    from . import bench, uav
    from .filter import NdrFilter

    sc = cfg["scenario"]
    logs = uav.generate_flight_logs(uav.benchmark_maneuvers(), sc["log_seconds"])
    model = uav.KinematicModel()
    policy = NdrFilter(model, ck.weights, ck.arch, ck.features) if ck else None
    filters = bench.uav_filters(model, policy, tuple(sc["shkf_b"]))
    rows, fails = [], []
    for kind in sc["kinds"]:
        spec = bench.ScenarioSpec(kind, sc["start"], sc["end"], sc["factor"])
        res = bench.run_scenario(spec, filters, logs, cfg["seed"], sc["n_seeds"])
        print(bench.results_table(res, f"scenario: {kind} (position RMSE, m)"))
        rows += [{"scenario": kind, **r.row()} for r in res.values()]
        if check and kind == bench.SENSOR_DENIED:
            if policy is None:
                fails.append("--check needs a policy checkpoint (filters.checkpoint)")
            else:
                for name, r in res.items():
                    if name != policy.name and not res[policy.name].mean < r.mean:
                        fails.append(f"sensor-denied RMSE {res[policy.name].mean:.4f} >= {name} {r.mean:.4f}")
    path = out / "results.csv"
    bench.write_results_csv(path, rows)
    return [path], {"check_failures": fails}


def cmd_ablate(cfg, out: Path) -> tuple[list[Path], dict]:
    from . import bench

    ab = cfg["ablation"]
    rows = bench.run_ablation(ab["axis"], train_config(cfg), ab["values"], ab["n_seeds"], ab["n_runs"], ab["T"],
                              cfg["seed"], progress=lambda r: print(json.dumps(r)))
    path = out / f"ablation_{ab['axis']}.csv"
    bench.write_results_csv(path, [r.row() for r in rows])
    return [path], {}


def cmd_transfer(cfg, out: Path) -> tuple[list[Path], dict]:
    import numpy as np

    from . import bench
    from . import policy as pol
    from .transfer import TransferMap

    t = cfg["transfer"]
    try:
        tm = TransferMap(t["x_off"], t["z_off"])
    except OffsetOutOfRange as exc:
        raise ConfigInvalid(str(exc)) from exc
    ck = _load_policy(cfg["filters"]["checkpoint"])
    if ck is None:
        arch = pol.PolicyArch.uav(cfg["train"]["depth"], pol.FeatureConfig())
        ck = pol.Checkpoint(arch, pol.FeatureConfig(), pol.init_weights(arch, np.random.default_rng(cfg["seed"])))
    if (ck.arch.n_x, ck.arch.n_z) != (tm.n_x_dst, tm.n_z_dst):
        raise ConfigInvalid("transfer needs a policy built for the 19-state, 6-channel system")
    results = _chaos_results(cfg, ck, transfer=tm)
    print(bench.results_table(results, f"transfer x_off={tm.x_off} z_off={tm.z_off} on {cfg['system']['name']}"))
    path = out / "transfer.csv"
    bench.write_results_csv(path, [{"x_off": tm.x_off, "z_off": tm.z_off, **r.row()} for r in results.values()])
    return [path], {}


def cmd_profile(cfg, out: Path) -> tuple[list[Path], dict]:
    from . import bench

    p = cfg["profile"]
    res = bench.uav_latency(p["depth"], p["d_h"], p["n_steps"], cfg["seed"])
    print(f"EKF {res['ekf_us']:.1f} us/step, NDR-SHKF {res['ndr_us']:.1f} us/step, ratio {res['ratio']:.2f}")
    path = out / "latency.json"
    path.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return [path], {}


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "profile": cmd_profile,
}


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ndr-shkf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--config", help="YAML config file or a previous run's manifest.json")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. system.n_runs=50")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command> or ./ndr_runs/<command>)")
        p.add_argument("--threads", type=int, help="cap on BLAS/worker threads (default: machine cores)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--check", action="store_true", help="exit 3 unless the expected ordering holds")
    return ap


def _cap_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigInvalid("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _cap_threads(args.threads)
        cfg = resolve_config(args.preset, args.config, args.overrides)
        out = output_dir(cfg, args.command, args.out)
        if args.command == "eval":
            paths, extra = cmd_eval(cfg, out, args.check)
        else:
            paths, extra = HANDLERS[args.command](cfg, out)
        write_manifest(out, args.command, copy.deepcopy(cfg), paths, extra)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NdrError, OSError, ArithmeticError, ValueError) as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    fails = extra.get("check_failures") or []
    for f in fails:
        print(f"check failed: {f}", file=sys.stderr)
    return EXIT_CHECK if fails else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
