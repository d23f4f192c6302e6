import json

import numpy as np
import pytest

from ndr_shkf import chaos
from ndr_shkf import kalman as kf
from ndr_shkf import policy as pl
from ndr_shkf import tensor as tn
from ndr_shkf import train as tr
from ndr_shkf.errors import AbortedOnNanStreak, ConfigInvalid, NonFiniteLoss
from ndr_shkf.kalman import Safeguards
from ndr_shkf.tensor import Tensor
from ndr_shkf.train import AdamState, BatchSpec, TrainConfig


def _col(*v):
    return np.array(v, float).reshape(-1, 1)


def test_chaos_loss_example():
    loss = tr.chaos_loss([_col(1, 2, 3)], [_col(2, 2, 3)], [_col(0, 2)], [_col(0, 0)], lambda_aux=0.1)
    assert loss.item() == pytest.approx(1.4, abs=1e-15)


def test_chaos_loss_rejects_bad_input():
    with pytest.raises(ConfigInvalid):
        tr.chaos_loss([_col(1)], [], [], [], 0.1)
    with tn.lenient(), pytest.raises(NonFiniteLoss):
        tr.chaos_loss([_col(np.nan)], [_col(0)], [_col(0)], [_col(0)], 0.1)


@pytest.mark.parametrize("e, delta, expected", [(1.0, 2.0, 0.5), (10.0, 5.0, 37.5), (-10.0, 5.0, 37.5), (0.0, 5.0, 0.0)])
def test_huber(e, delta, expected):
    assert tr.huber(np.array([[e]]), delta).item() == expected


def _uav_step_loss(q, qt):
    r = [_col(0, 0, 0)]
    return tr.uav_loss(r, r, [np.asarray(q, float)[:, None]], [np.asarray(qt, float)[:, None]], [_col(0)], [_col(0)])[1]


def test_quaternion_distance_double_cover():
    q = np.array([0.5, 0.5, 0.5, 0.5])
    assert _uav_step_loss(q, q)["att"] == pytest.approx(0.0, abs=1e-15)
    assert _uav_step_loss(-q, q)["att"] == pytest.approx(0.0, abs=1e-15)


def test_quaternion_distance_orthogonal_is_one():
    assert _uav_step_loss([1, 0, 0, 0], [0, 1, 0, 0])["att"] == 1.0


def test_uav_loss_combines_parts():
    total, parts = tr.uav_loss([_col(10, 0, 0)], [_col(0, 0, 0)], [_col(1, 0, 0, 0)], [_col(0, 1, 0, 0)], [_col(2)], [_col(0)])
    assert parts["pos"] == pytest.approx(37.5 / 3)
    assert total.item() == pytest.approx(37.5 / 3 + 10.0 + 0.1 * 4.0)


def test_clip_global_norm_rescales():
    g, n = tr.clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert n == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8], rtol=1e-15)
    g, n = tr.clip_global_norm({"a": np.array([0.3])}, 1.0)
    assert n == pytest.approx(0.3) and g["a"][0] == 0.3
    with pytest.raises(ValueError):
        tr.clip_global_norm({"a": np.ones(1)}, 0.0)


def test_adam_first_step_is_sign_step():
    w = {"a": np.array([1.0, -2.0, 0.5])}
    g = {"a": np.array([0.3, -7.0, 1e-3])}
    new, state = tr.adam_step(w, g, AdamState.zeros_like(w), lr=1e-3)
    np.testing.assert_allclose(new["a"] - w["a"], -1e-3 * np.sign(g["a"]), rtol=1e-4)
    assert state.t == 1 and w["a"][0] == 1.0


def test_adam_zero_gradient_keeps_weights():
    w = {"a": np.array([1.0, 2.0])}
    new, _ = tr.adam_step(w, {"a": np.zeros(2)}, AdamState.zeros_like(w), lr=1.0)
    np.testing.assert_array_equal(new["a"], w["a"])


@pytest.mark.parametrize("epoch, T", [(0, 20), (299, 20), (300, 50), (900, 200), (1999, 200), (2000, 300)])
def test_curriculum(epoch, T):
    assert tr.curriculum_length(epoch) == T
    assert TrainConfig.uav_defaults().seq_len_at(epoch) == T


@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (879, 1e-3), (880, 5e-4), (1540, 2e-4), (1980, 1e-4)])
def test_uav_learning_rate_schedule(epoch, lr):
    assert TrainConfig.uav_defaults(lr=1e-3).lr_for(epoch) == pytest.approx(lr)


@pytest.mark.parametrize(
    "kw",
    [{"env": "sea"}, {"epochs": -1}, {"lr": 0.0}, {"grad_clip": -1.0}, {"curriculum_lengths": (1,)}, {"lr_factors": (1.0, 0.5)}],
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigInvalid):
        TrainConfig(**kw)


def test_zero_epochs_returns_initial_weights():
    cfg = TrainConfig(epochs=0, seed=4)
    res = tr.train(cfg)
    ref = pl.init_weights(res.arch, np.random.default_rng(np.random.SeedSequence([4, 7])))
    assert res.history == [] and all(np.array_equal(res.weights[k], ref[k]) for k in ref)


def _tiny_spec(B=2, T=4, seed=0):
    model = kf.ChaosModel()
    ep = chaos.make_episodes(model.params, range(B), T, seed=seed)
    return BatchSpec(model, ep.x_hat0, ep.P0, ep.measurements, ep.states)


def test_batch_loss_gradient_matches_differences():
    arch = pl.PolicyArch.chaos()
    w0 = pl.init_weights(arch, np.random.default_rng(0))
    spec = _tiny_spec()
    name = "pi3.b"

    def fn(leaf):
        w = {k: (leaf if k == name else Tensor(v)) for k, v in w0.items()}
        return tr.chaos_batch_loss(w, arch, pl.FeatureConfig(), Safeguards(), spec, 0.1)[0]

    report = tn.grad_check(fn, w0[name], step=1e-5, tol=1e-5, floor=1e-4)
    assert report.passed, report


def test_truncated_element_drops_out_of_the_loss():
    arch = pl.PolicyArch.chaos()
    w = pl.init_weights(arch, np.random.default_rng(1))
    spec = _tiny_spec()
    bad = BatchSpec(spec.model, spec.x_hat0, spec.P0, spec.Z, spec.truth.copy())
    bad.truth[1] += 1e4
    fn = tr._chaos_loss_fn(0.1)
    value, _, grads, n_trunc = tr.batch_gradient(w, arch, pl.FeatureConfig(), Safeguards(), bad, fn)
    one = BatchSpec(spec.model, spec.x_hat0[:1], spec.P0, spec.Z[:1], spec.truth[:1])
    v1, _, g1, n1 = tr.batch_gradient(w, arch, pl.FeatureConfig(), Safeguards(), one, fn)
    assert n_trunc == 1 and n1 == 0
    assert value == pytest.approx(v1 / 2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(grads[k], g1[k] / 2, rtol=1e-9, atol=1e-14)


def test_short_training_run_logs(tmp_path):
    cfg = TrainConfig(epochs=2, batches_per_epoch=1, batch_size=2, seq_len=5, checkpoint_every=1)
    res = tr.train(cfg, log_path=tmp_path / "log.jsonl", checkpoint_dir=tmp_path / "ck")
    assert len(res.history) == 2 and all(np.isfinite(h["loss"]) for h in res.history)
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1] and "seconds" not in lines[0]
    assert (tmp_path / "ck" / "epoch00002.json").exists()
    again = tr.train(cfg)
    assert all(np.array_equal(res.weights[k], again.weights[k]) for k in res.weights)


def test_masked_batches_leave_weights_and_moments_alone(monkeypatch):
    calls = []

    def fake(*args):
        calls.append(1)
        return float("nan"), {}, None, -1

    monkeypatch.setattr(tr, "_safe_gradient", fake)
    cfg = TrainConfig(epochs=1, batches_per_epoch=3, batch_size=1, seq_len=2)
    res = tr.train(cfg)
    init = tr.train(TrainConfig(epochs=0)).weights
    assert len(calls) == 3 and res.history[0]["masked"] == 3 and res.history[0]["loss"] is None
    assert all(np.array_equal(res.weights[k], init[k]) for k in init)
    with pytest.raises(AbortedOnNanStreak):
        tr.train(TrainConfig(epochs=2, batches_per_epoch=3, batch_size=1, seq_len=2, nan_streak=5))
