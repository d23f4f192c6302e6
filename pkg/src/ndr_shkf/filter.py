"""The learned-adaptation filter step and the common filter interface.

:class:`NdrFilter`, :class:`EkfFilter` and :class:`ShkfFilter` share an
``init``/``step`` interface so that evaluation code can drive any of them over
the same batched measurement streams.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import kalman as kf
from . import policy as pol
from . import tensor as tn
from .errors import FILTER_FAILURES, ConfigInvalid
from .kalman import FilterState, Safeguards, SystemModel
from .tensor import Tensor
from .transfer import TransferMap, embed_features, extract_adaptation


@dataclass
class NdrState:
    fs: FilterState
    hidden: list
    k: int = 0


@dataclass
class NdrDiagnostics:
    nu: Tensor
    S: Tensor
    K: Tensor
    d: Tensor
    y: Tensor
    y_hat: Tensor | None


def ndr_step(
    model: SystemModel,
    weights: Mapping[str, Tensor],
    arch: pol.PolicyArch,
    cfg: pol.FeatureConfig,
    sg: Safeguards,
    ns: NdrState,
    z,
    u=None,
    dt=None,
    decode: bool = True,
    transfer: TransferMap | None = None,
    joseph: bool = False,
):
    """One recursive update.

    Order: predict with ``q_{k-1}``; innovation, ``S`` with ``r_{k-1}`` and
    gain; features; policy; state/covariance correction; empirical moments;
    element-wise blend and safeguard clamp. The new ``q``/``r`` take effect at
    the next step.
    """
    fs = ns.fs
    pred, F = kf.ekf_predict(model, fs, u, dt, sg)
    inn = kf.innovate(model, pred, z, u)
    y = pol.build_features(cfg, inn.nu, inn.S, inn.K)
    y_in = y if transfer is None else embed_features(transfer, y)
    out = pol.policy_forward(weights, arch, y_in, ns.hidden, decode=decode)
    if transfer is None:
        dQ, dR = out.d[..., : model.n_x, :], out.d[..., model.n_x :, :]
    else:
        dQ, dR = extract_adaptation(out.d, transfer)
    post = kf.correct(pred, inn, joseph, sg)
    new_fs = kf.adapt(model, fs, pred, post, F, inn, dQ, dR, sg)
    diag = NdrDiagnostics(inn.nu, inn.S, inn.K, out.d, y_in, out.y_hat)
    return NdrState(new_fs, out.hidden, ns.k + 1), diag


# --- filters with a shared interface ---------------------------------------


def _select(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Per-batch-element choice; ``mask`` has the batch shape."""
    m = np.asarray(mask, dtype=bool).reshape(mask.shape + (1, 1))
    return tn.where(m, a, b)


def reset_elements(fs: FilterState, mask, fallback: FilterState) -> FilterState:
    return FilterState(
        _select(mask, fallback.x, fs.x),
        _select(mask, fallback.P, fs.P),
        _select(mask, fallback.q, fs.q),
        _select(mask, fallback.r, fs.r),
    )


class EkfFilter:
    name = "EKF"

    def __init__(self, model: SystemModel, sg: Safeguards = Safeguards(), joseph: bool = False):
        self.model, self.sg, self.joseph = model, sg, joseph

    def init(self, x0, P0):
        return FilterState.initial(self.model, x0, P0)

    def filter_state(self, state) -> FilterState:
        return state

    def with_filter_state(self, state, fs: FilterState):
        return fs

    def reset(self, state, mask, x0, P0):
        return reset_elements(state, mask, self.init(x0, P0))

    def step(self, state, z, u=None, dt=None):
        return kf.ekf_step(self.model, state, z, u, dt, self.joseph, self.sg)[0]

    def with_model(self, model):
        return type(self)(model, self.sg, self.joseph)


class ShkfFilter(EkfFilter):
    """Classical fading-memory filter; the state carries its own step counter."""

    def __init__(self, model: SystemModel, b: float, sg: Safeguards = Safeguards(), joseph: bool = False):
        super().__init__(model, sg, joseph)
        if not 0.0 < b < 1.0:
            raise ConfigInvalid("forgetting factor must lie in (0, 1)")
        self.b = b
        self.name = f"SHKF{str(b)[2:]}"

    def init(self, x0, P0):
        return (FilterState.initial(self.model, x0, P0), 0)

    def filter_state(self, state):
        return state[0]

    def with_filter_state(self, state, fs):
        return (fs, state[1])

    def reset(self, state, mask, x0, P0):
        return (reset_elements(state[0], mask, self.init(x0, P0)[0]), state[1])

    def step(self, state, z, u=None, dt=None):
        fs, k = state
        d = kf.shkf_adaptation_factor(self.b, k)
        fs, _ = kf.shkf_step(self.model, fs, z, d, u, dt, self.sg, self.joseph)
        return (fs, k + 1)

    def with_model(self, model):
        return type(self)(model, self.b, self.sg, self.joseph)


class NdrFilter(EkfFilter):
    name = "NDR-SHKF"

    def __init__(
        self,
        model: SystemModel,
        weights: Mapping[str, np.ndarray],
        arch: pol.PolicyArch,
        cfg: pol.FeatureConfig = pol.FeatureConfig(),
        sg: Safeguards = Safeguards(),
        transfer: TransferMap | None = None,
        joseph: bool = False,
    ):
        super().__init__(model, sg, joseph)
        pol.check_weights(arch, weights)
        self.raw_weights = weights
        self.weights = pol.as_tensors(weights)
        self.arch, self.cfg, self.transfer = arch, cfg, transfer
        n_x, n_z = (model.n_x, model.n_z) if transfer is None else (transfer.n_x_dst, transfer.n_z_dst)
        if (arch.n_x, arch.n_z) != (n_x, n_z):
            raise ConfigInvalid(f"policy built for {(arch.n_x, arch.n_z)}, model has {(model.n_x, model.n_z)}")
        if arch.feature_dim != cfg.dim(n_x, n_z):
            raise ConfigInvalid("feature dimension does not match the feature variant")
        if transfer is not None and cfg.variant != pol.WHITENED:
            raise ConfigInvalid("transfer embedding needs whitened features")

    def init(self, x0, P0):
        fs = FilterState.initial(self.model, x0, P0)
        return NdrState(fs, pol.zero_state(self.arch, fs.x.shape[:-2]), 0)

    def filter_state(self, state):
        return state.fs

    def with_filter_state(self, state, fs):
        return replace(state, fs=fs)

    def reset(self, state, mask, x0, P0):
        fresh = self.init(x0, P0)
        hidden = [_select(mask, h0, h) for h0, h in zip(fresh.hidden, state.hidden)]
        return NdrState(reset_elements(state.fs, mask, fresh.fs), hidden, state.k)

    def step(self, state, z, u=None, dt=None):
        ns, _ = ndr_step(
            self.model, self.weights, self.arch, self.cfg, self.sg, state, z, u, dt,
            decode=False, transfer=self.transfer, joseph=self.joseph,
        )
        return ns

    def with_model(self, model):
        return type(self)(model, self.raw_weights, self.arch, self.cfg, self.sg, self.transfer, self.joseph)


# --- rollouts ----------------------------------------------------------------


@dataclass
class Rollout:
    states: list  # NdrState after each step
    diagnostics: list  # NdrDiagnostics per step
    diverged: bool = False
    error: str | None = None

    @property
    def x_hat(self) -> np.ndarray:
        return np.stack([s.fs.x.data[..., 0] for s in self.states], axis=-2)


def rollout(
    model: SystemModel,
    weights: Mapping,
    arch: pol.PolicyArch,
    cfg: pol.FeatureConfig,
    init: NdrState,
    Z,
    U=None,
    sg: Safeguards = Safeguards(),
    on_tape: bool = False,
    decode: bool = True,
    transfer: TransferMap | None = None,
) -> tuple[Rollout, tn.Tape | None, dict]:
    """Chain ``ndr_step`` over ``T`` measurements.

    With ``on_tape`` the weights become leaves of a fresh tape and the full
    unrolled graph is kept for backpropagation; the tape and the leaf map are
    returned alongside the rollout. A filter failure stops the rollout and
    marks it diverged.
    """
    tape = tn.Tape() if on_tape else None
    if on_tape:
        w = {k: tape.leaf(v) for k, v in weights.items()}
    else:
        w = {k: tn.as_tensor(v) for k, v in weights.items()}
    Z = np.asarray(Z, dtype=float)
    states, diags = [], []
    ns = init
    try:
        for k in range(Z.shape[-2]):
            u = None if U is None else U[..., k, :]
            ns, d = ndr_step(model, w, arch, cfg, sg, ns, Z[..., k, :], u, decode=decode, transfer=transfer)
            states.append(ns)
            diags.append(d)
    except FILTER_FAILURES as exc:
        return Rollout(states, diags, True, f"{type(exc).__name__}: {exc}"), tape, w
    return Rollout(states, diags), tape, w
