"""End-to-end training by backpropagation through the unrolled filter.

A batch is rolled out as one vectorized trajectory bundle on a single tape.
Batch elements whose filter fails or whose error crosses the divergence
threshold are truncated: their loss counts only the steps before the failure
and from that step on they are driven from a detached placeholder state, so
no NaN ever reaches the backward pass.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import chaos
from . import kalman as kf
from . import policy as pol
from . import tensor as tn
from .errors import AbortedOnNanStreak, ConfigInvalid, NonFiniteLoss
from .filter import NdrState, ndr_step, reset_elements
from .kalman import FilterState, Safeguards
from .tensor import Tensor

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 100.0


# --- losses -----------------------------------------------------------------


def chaos_loss(x_hat, truth, y, y_hat, lambda_aux: float):
    """``sum_k |x_k - x_hat_k|^2 + lambda_aux |y_k - y_hat_k|^2`` for one trajectory.

    Sequences are lists of column tensors (or arrays); returns a scalar tensor.
    """
    if not len(x_hat) == len(truth) == len(y) == len(y_hat):
        raise ConfigInvalid("loss sequences must have equal lengths")
    total = Tensor(np.zeros(()))
    for xh, xt, yk, yh in zip(x_hat, truth, y, y_hat):
        total = total + tn.sqnorm(tn.as_tensor(xt) - xh)
        if lambda_aux:
            total = total + lambda_aux * tn.sqnorm(tn.as_tensor(yk) - yh)
    if not np.isfinite(total.data).all():
        raise NonFiniteLoss("chaos loss is not finite")
    return total


def huber(e, delta: float) -> Tensor:
    """Element-wise Huber penalty."""
    e = tn.as_tensor(e)
    a = tn.abs_(e)
    quad = 0.5 * e * e
    lin = delta * (a - 0.5 * delta)
    return tn.where(np.abs(e.data) <= delta, quad, lin)


def uav_loss(positions, truths, quats, quat_truths, y, y_hat, lambda_att=10.0, lambda_aux=0.1, delta=5.0):
    """Time-averaged Huber position loss plus quaternion cosine distance and reconstruction.

    Inputs are per-step sequences of columns; returns ``(total, parts)``.
    """
    T = len(positions)
    if T == 0:
        raise ConfigInvalid("empty sequence")
    pos = Tensor(np.zeros(()))
    att = Tensor(np.zeros(()))
    aux = Tensor(np.zeros(()))
    for r, rt, q, qt, yk, yh in zip(positions, truths, quats, quat_truths, y, y_hat):
        e = tn.as_tensor(r) - rt
        pos = pos + tn.mean(huber(e, delta))
        dot = tn.sum_(tn.as_tensor(q) * tn.as_tensor(qt))
        att = att + (1.0 - tn.abs_(dot))
        if lambda_aux and yh is not None:
            aux = aux + tn.mean(tn.square(tn.as_tensor(yk) - yh))
    pos, att, aux = pos * (1.0 / T), att * (1.0 / T), aux * (1.0 / T)
    total = pos + lambda_att * att + lambda_aux * aux
    if not np.isfinite(total.data).all():
        raise NonFiniteLoss("uav loss is not finite")
    return total, {"pos": pos.item(), "att": att.item(), "aux": aux.item()}


# --- optimisation -----------------------------------------------------------


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], threshold: float):
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        s = threshold / norm
        return {k: g * s for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()}, {k: np.zeros_like(w) for k, w in weights.items()}, **kw)


def adam_step(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam; returns new weights and a new state (inputs untouched)."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_w, m, v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        new_w[k] = w - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return new_w, AdamState(m, v, t, b1, b2, state.eps)


def curriculum_length(epoch: int, lengths=(20, 50, 100, 200, 300), starts=(0, 300, 600, 900, 2000)) -> int:
    """Sequence length in force at ``epoch`` for a piecewise-constant schedule."""
    T = lengths[0]
    for L, s in zip(lengths, starts):
        if epoch >= s:
            T = L
    return T


def lr_at(epoch: int, epochs: int, base: float, fractions=(0.0,), factors=(1.0,)) -> float:
    """Piecewise-constant decay: ``base * factors[i]`` once ``epoch >= fractions[i] * epochs``."""
    f = factors[0]
    for fr, fa in zip(fractions, factors):
        if epoch >= fr * epochs:
            f = fa
    return base * f


# --- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    env: str = "chaos"
    epochs: int = 300
    batches_per_epoch: int = 8
    batch_size: int = 64
    seq_len: int = 60
    curriculum_lengths: tuple = ()
    curriculum_starts: tuple = ()
    lr: float = 1e-3
    lr_fractions: tuple = (0.0,)
    lr_factors: tuple = (1.0,)
    grad_clip: float = 0.5
    lambda_aux: float = 0.1
    lambda_att: float = 10.0
    huber_delta: float = 5.0
    depth: int = 3
    features: str = pol.WHITENED
    init_sd: float | None = None
    seed: int = 0
    nan_streak: int = 50
    checkpoint_every: int = 0
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    drop_ratio: float = 0.5
    uav_logs: int = 5
    uav_log_seconds: float = 20.0

    def __post_init__(self):
        if self.env not in ("chaos", "uav"):
            raise ConfigInvalid(f"unknown training env {self.env!r}")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigInvalid("epochs >= 0, batches_per_epoch >= 1 and batch_size >= 1 required")
        if not self.grad_clip > 0 or not self.lr > 0:
            raise ConfigInvalid("lr and grad_clip must be positive")
        for name in ("curriculum_lengths", "curriculum_starts", "lr_fractions", "lr_factors"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.curriculum_lengths) != len(self.curriculum_starts):
            raise ConfigInvalid("curriculum lengths and starts must pair up")
        if len(self.lr_fractions) != len(self.lr_factors):
            raise ConfigInvalid("lr fractions and factors must pair up")

    @classmethod
    def uav_defaults(cls, **kw) -> "TrainConfig":
        base = dict(
            env="uav", epochs=2200, batches_per_epoch=5, batch_size=128, grad_clip=0.1,
            curriculum_lengths=(20, 50, 100, 200, 300), curriculum_starts=(0, 300, 600, 900, 2000),
            lr_fractions=(0.0, 0.4, 0.7, 0.9), lr_factors=(1.0, 0.5, 0.2, 0.1),
        )
        base.update(kw)
        return cls(**base)

    def seq_len_at(self, epoch: int) -> int:
        if self.curriculum_lengths:
            return curriculum_length(epoch, self.curriculum_lengths, self.curriculum_starts)
        return self.seq_len

    def lr_for(self, epoch: int) -> float:
        return lr_at(epoch, self.epochs, self.lr, self.lr_fractions, self.lr_factors)


@dataclass
class TrainResult:
    weights: dict
    arch: pol.PolicyArch
    features: pol.FeatureConfig
    history: list = field(default_factory=list)


# --- batched rollout loss ---------------------------------------------------


@dataclass
class BatchSpec:
    """Everything a batched rollout needs; arrays carry a leading batch axis."""

    model: kf.SystemModel
    x_hat0: np.ndarray  # (B, n_x)
    P0: np.ndarray  # (n_x, n_x)
    Z: np.ndarray  # (B, T, n_z)
    truth: np.ndarray  # (B, T, n_x)
    U: np.ndarray | None = None  # (B, T, n_u)
    dt: float | None = None


def _batch_rollout(w, arch, cfg, sg, spec: BatchSpec, stop_at: np.ndarray | None, decode: bool):
    """Roll out a batch; elements at or past ``stop_at`` run on placeholders."""
    B, T = spec.Z.shape[:2]
    model = spec.model
    fs0 = FilterState.initial(model, spec.x_hat0, spec.P0)
    ns = NdrState(fs0, pol.zero_state(arch, (B,)), 0)
    xs, ys, yhs, first_bad = [], [], [], np.full(B, T)
    for k in range(T):
        if stop_at is not None:
            dead = stop_at <= k
            if dead.any():
                anchor = spec.truth[:, k - 1] if k > 0 else spec.x_hat0
                fresh = FilterState.initial(model, anchor, np.eye(model.n_x))
                hidden = [tn.where(dead[:, None, None], np.zeros_like(h.data), h) for h in ns.hidden]
                ns = NdrState(reset_elements(ns.fs, dead, fresh), hidden, ns.k)
        u = None if spec.U is None else spec.U[:, k]
        ns, d = ndr_step(model, w, arch, cfg, sg, ns, spec.Z[:, k], u, spec.dt, decode=decode)
        xs.append(ns.fs.x)
        ys.append(d.y)
        yhs.append(d.y_hat)
        xv = ns.fs.x.data[..., 0]
        Pd = np.diagonal(ns.fs.P.data, axis1=-2, axis2=-1)
        err = np.sqrt(np.mean((xv - spec.truth[:, k]) ** 2, axis=-1))
        bad = ~(np.isfinite(xv).all(-1) & np.isfinite(Pd).all(-1) & np.isfinite(err))
        bad |= ~(err <= DIVERGENCE_THRESHOLD)
        first_bad = np.where(bad & (first_bad == T), k, first_bad)
    return xs, ys, yhs, first_bad


def chaos_batch_loss(w, arch, cfg, sg, spec: BatchSpec, lambda_aux: float, stop_at=None):
    """Mean over the batch of the per-trajectory loss; returns ``(loss, parts, first_bad)``."""
    B, T = spec.Z.shape[:2]
    xs, ys, yhs, first_bad = _batch_rollout(w, arch, cfg, sg, spec, stop_at, decode=bool(lambda_aux))
    limit = first_bad if stop_at is None else np.minimum(first_bad, stop_at)
    state_term = Tensor(np.zeros(()))
    aux_term = Tensor(np.zeros(()))
    for k in range(T):
        m = (limit > k).astype(float)[:, None, None]
        e = spec.truth[:, k][..., None] - xs[k]
        state_term = state_term + tn.sum_(m * (e * e))
        if lambda_aux:
            r = ys[k] - yhs[k]
            aux_term = aux_term + tn.sum_(m * (r * r))
    loss = (state_term + lambda_aux * aux_term) * (1.0 / B)
    return loss, {"state": state_term.item() / B, "aux": aux_term.item() / B}, limit


def batch_gradient(weights, arch, cfg, sg, spec: BatchSpec, loss_fn: Callable):
    """Loss and gradients of one batch with divergence truncation.

    The first pass runs leniently; if any element fails, a second pass
    truncates the failing elements at their first bad step. Returns
    ``(loss value, parts, grads or None, n_truncated)``; ``grads`` is None
    when every element failed at its first step.
    """
    with tn.lenient():
        tape = tn.Tape()
        leaves = {k: tape.leaf(v) for k, v in weights.items()}
        loss, parts, limit = loss_fn(leaves, arch, cfg, sg, spec, None)
        T = spec.Z.shape[1]
        truncated = int(np.sum(limit < T))
        if truncated:
            tape = tn.Tape()
            leaves = {k: tape.leaf(v) for k, v in weights.items()}
            loss, parts, limit = loss_fn(leaves, arch, cfg, sg, spec, limit)
        if not np.isfinite(loss.data).all() or np.all(limit == 0):
            return float("nan"), parts, None, truncated
        names = list(weights)
        grads = tape.gradient(loss, [leaves[k] for k in names])
    return loss.item(), parts, dict(zip(names, grads)), truncated


def _safe_gradient(*args):
    try:
        return batch_gradient(*args)
    except Exception as exc:  # noqa: BLE001 - any failure masks the batch
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        log.warning("batch masked: %s: %s", type(exc).__name__, exc)
        return float("nan"), {}, None, -1


def uav_batch_loss(w, arch, cfg, sg, spec: BatchSpec, lambda_att=10.0, lambda_aux=0.1, delta=5.0, stop_at=None):
    """Batch mean of the time-averaged position/attitude/reconstruction loss.

    The attitude term uses the normalized quaternion estimate. Returns
    ``(loss, parts, first_bad)``.
    """
    B, T = spec.Z.shape[:2]
    xs, ys, yhs, first_bad = _batch_rollout(w, arch, cfg, sg, spec, stop_at, decode=bool(lambda_aux))
    limit = first_bad if stop_at is None else np.minimum(first_bad, stop_at)
    pos = Tensor(np.zeros(()))
    att = Tensor(np.zeros(()))
    aux = Tensor(np.zeros(()))
    for k in range(T):
        m = (limit > k).astype(float)[:, None, None]
        e = xs[k][:, 0:3] - spec.truth[:, k, 0:3, None]
        pos = pos + tn.sum_(m * huber(e, delta)) * (1.0 / 3.0)
        q = xs[k][:, 6:10]
        qn = q / tn.sqrt(tn.sum_(q * q, axis=-2, keepdims=True))
        dot = tn.sum_(qn * spec.truth[:, k, 6:10, None], axis=-2, keepdims=True)
        att = att + tn.sum_(m * (1.0 - tn.abs_(dot)))
        if lambda_aux:
            r = ys[k] - yhs[k]
            aux = aux + tn.sum_(m * (r * r)) * (1.0 / r.shape[-2])
    scale = 1.0 / (B * T)
    pos, att, aux = pos * scale, att * scale, aux * scale
    loss = pos + lambda_att * att + lambda_aux * aux
    return loss, {"pos": pos.item(), "att": att.item(), "aux": aux.item()}, limit


def _uav_loss_fn(lambda_att, lambda_aux, delta):
    def fn(w, arch, cfg, sg, spec, stop_at):
        return uav_batch_loss(w, arch, cfg, sg, spec, lambda_att, lambda_aux, delta, stop_at)

    return fn


# --- batch sources ----------------------------------------------------------


def chaos_batch(cfg: TrainConfig, model: kf.ChaosModel, batch_index: int, T: int) -> BatchSpec:
    ids = np.arange(batch_index * cfg.batch_size, (batch_index + 1) * cfg.batch_size)
    ep = chaos.make_episodes(model.params, ids, T, cfg.seed, "train", cfg.init_sd)
    keep = ~ep.gt_diverged
    ep = ep.subset(np.flatnonzero(keep))
    return BatchSpec(model, ep.x_hat0, ep.P0, ep.measurements, ep.states)


def _chaos_loss_fn(lambda_aux):
    def fn(w, arch, cfg, sg, spec, stop_at):
        return chaos_batch_loss(w, arch, cfg, sg, spec, lambda_aux, stop_at)

    return fn


# --- main loop --------------------------------------------------------------


def train(
    cfg: TrainConfig,
    weights: dict | None = None,
    sg: Safeguards = Safeguards(),
    log_path=None,
    checkpoint_dir=None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a policy; returns final weights and the per-epoch history.

    The history (and the optional JSONL log) records epoch, mean loss,
    component losses, mean pre-clip gradient norm, learning rate, sequence
    length and the number of masked batches.
    """
    features = pol.FeatureConfig(cfg.features)
    if cfg.env == "chaos":
        arch = pol.PolicyArch.chaos(cfg.depth, features)
        model = kf.ChaosModel()
        source = lambda b, T: chaos_batch(cfg, model, b, T)  # noqa: E731
        loss_fn = _chaos_loss_fn(cfg.lambda_aux)
    else:
        from . import uav

        arch = pol.PolicyArch.uav(cfg.depth, features)
        sampler = uav.TrainingWindows.synthetic(cfg)
        source = sampler.batch
        loss_fn = _uav_loss_fn(cfg.lambda_att, cfg.lambda_aux, cfg.huber_delta)
    if weights is None:
        weights = pol.init_weights(arch, np.random.default_rng(np.random.SeedSequence([cfg.seed, 7])))
    pol.check_weights(arch, weights)
    weights = {k: np.array(v, dtype=float) for k, v in weights.items()}
    adam = AdamState.zeros_like(weights)
    history: list[dict] = []
    streak = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            T = cfg.seq_len_at(epoch)
            lr = cfg.lr_for(epoch)
            losses, norms, parts_acc, masked, trunc = [], [], {}, 0, 0
            t0 = time.perf_counter()
            for j in range(cfg.batches_per_epoch):
                spec = source(epoch * cfg.batches_per_epoch + j, T)
                value, parts, grads, n_trunc = _safe_gradient(weights, arch, features, sg, spec, loss_fn)
                if grads is None or not all(np.isfinite(g).all() for g in grads.values()):
                    masked += 1
                    streak += 1
                    if streak >= cfg.nan_streak:
                        raise AbortedOnNanStreak(f"{streak} consecutive masked batches")
                    continue
                streak = 0
                trunc += max(n_trunc, 0)
                grads, norm = clip_global_norm(grads, cfg.grad_clip)
                weights, adam = adam_step(weights, grads, adam, lr)
                losses.append(value)
                norms.append(norm)
                for k, v in parts.items():
                    parts_acc.setdefault(k, []).append(v)
            rec = {
                "epoch": epoch,
                "loss": float(np.mean(losses)) if losses else None,
                **{f"loss_{k}": float(np.mean(v)) for k, v in parts_acc.items()},
                "grad_norm": float(np.mean(norms)) if norms else None,
                "lr": lr,
                "T": T,
                "masked": masked,
                "truncated": trunc,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(rec)
            if fh:
                fh.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
                fh.flush()
            if progress:
                progress(rec)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                pol.save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:05d}", arch, features, weights,
                                    {"epoch": epoch + 1, "train": asdict(cfg)})
    finally:
        if fh:
            fh.close()
    return TrainResult(weights, arch, features, history)
