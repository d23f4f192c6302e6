import json
import subprocess
import sys

import numpy as np
import pytest

from ndr_shkf import cli
from ndr_shkf import policy as pl
from ndr_shkf.errors import ConfigInvalid

SMALL = ["--set", "system.n_runs=3", "--set", "system.T=20"]
TINY_TRAIN = ["--set", "train.epochs=1", "--set", "train.batches_per_epoch=1", "--set", "train.batch_size=2",
              "--set", "train.seq_len=5"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.mark.parametrize(
    "text, expected",
    [("a.b=3", {"a": {"b": 3}}), ("x=[1, 2]", {"x": [1, 2]}), ("s.t=null", {"s": {"t": None}}), ("k=lorenz", {"k": "lorenz"})],
)
def test_parse_override(text, expected):
    assert cli.parse_override(text) == expected


@pytest.mark.parametrize(
    "overrides",
    [["nope=1"], ["system.bogus=1"], ["system.T=abc"], ["system.name=venus"], ["filters.shkf_b=[1.5]"],
     ["ablation.axis=width"], ["train.env=sea"], ["system"]],
)
def test_bad_configs_are_rejected(overrides):
    with pytest.raises(ConfigInvalid):
        cli.resolve_config(overrides=overrides)


def test_layering_order(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("system: {name: rossler, T: 50}\nseed: 9\n")
    cfg = cli.resolve_config("lorenz-train", path, ["system.T=70"])
    assert cfg["system"]["name"] == "rossler" and cfg["system"]["T"] == 70 and cfg["seed"] == 9
    assert cfg["train"]["epochs"] == 300 and cfg["system"]["noise"] == "train"


@pytest.mark.parametrize("preset", sorted(cli.PRESETS))
def test_presets_resolve(preset):
    cli.resolve_config(preset)


def test_simulate_chaos(tmp_path):
    assert run("simulate", "--out", tmp_path, "--set", "simulate.n_episodes=2", "--set", "system.T=5") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["episode_00000.csv", "episode_00001.csv", "manifest.json"]


def test_eval_is_deterministic_and_manifest_reruns(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run("eval", "--out", a, *SMALL) == 0
    assert run("eval", "--out", b, *SMALL) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "eval" and set(manifest["artifacts"]) == {"results.csv", "runs.jsonl", "crmse.csv"}
    assert run("eval", "--out", c, "--config", a / "manifest.json") == 0
    assert (c / "results.csv").read_bytes() == (a / "results.csv").read_bytes()


def test_train_with_zero_epochs_writes_initial_weights(tmp_path):
    assert run("train", "--out", tmp_path, "--set", "train.epochs=0", "--set", "seed=3") == 0
    ck = pl.load_checkpoint(tmp_path / "policy")
    ref = pl.init_weights(ck.arch, np.random.default_rng(np.random.SeedSequence([3, 7])))
    assert all(np.array_equal(ck.weights[k], ref[k]) for k in ref)


def test_train_then_eval_check(tmp_path):
    assert run("train", "--out", tmp_path / "t", *TINY_TRAIN) == 0
    assert (tmp_path / "t" / "train_log.jsonl").read_text().count("\n") == 1
    code = run("eval", "--check", "--out", tmp_path / "e", *SMALL, "--set", f"filters.checkpoint={tmp_path / 't' / 'policy'}")
    assert code in (0, 3)
    rows = (tmp_path / "e" / "results.csv").read_text().splitlines()
    assert rows[-1].startswith("NDR-SHKF")


def test_check_without_policy_fails(tmp_path):
    assert run("eval", "--check", "--out", tmp_path, *SMALL) == 3


def test_transfer_offsets(tmp_path):
    assert run("transfer", "--out", tmp_path / "ok", *SMALL, "--set", "transfer.x_off=8", "--set", "transfer.z_off=2") == 0
    assert "x_off" in (tmp_path / "ok" / "transfer.csv").read_text()
    assert run("transfer", "--out", tmp_path / "bad", *SMALL, "--set", "transfer.z_off=5") == 1


def test_missing_checkpoint_is_a_config_error(tmp_path):
    assert run("eval", "--out", tmp_path, *SMALL, "--set", f"filters.checkpoint={tmp_path / 'none'}") == 1


def test_profile_and_ablate(tmp_path):
    assert run("profile", "--out", tmp_path / "p", "--set", "profile.n_steps=20") == 0
    lat = json.loads((tmp_path / "p" / "latency.json").read_text())
    assert {"ekf_us", "ndr_us", "ratio"} <= set(lat)
    assert run("ablate", "--out", tmp_path / "a", *TINY_TRAIN, "--set", "ablation.values=[1]", "--set", "ablation.n_runs=2",
               "--set", "ablation.T=10") == 0
    assert (tmp_path / "a" / "ablation_depth.csv").read_text().count("\n") == 3


def test_output_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    cfg = cli.resolve_config()
    assert cli.output_dir(cfg, "eval") == tmp_path / "eval"


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ndr_shkf.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in cli.COMMANDS:
        assert name in out.stdout
