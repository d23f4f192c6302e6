"""Neural hyper-controller: whitened features, encoder, stacked GRUs, heads.

Weights live in a flat ``name -> array`` mapping. Linear layers are stored as
``<layer>.W`` with shape ``(out, in)`` and ``<layer>.b`` with shape
``(out, 1)``. Each GRU layer stores its three gates stacked row-wise in the
order ``[z; r; n]``::

    gru1.W  (3 d_h, in)    input weights  W_z, W_r, W_n
    gru1.U  (3 d_h, d_h)   recurrent weights U_z, U_r, U_n
    gru1.b  (3 d_h, 1)     biases b_z, b_r, b_n
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .errors import ConfigInvalid, ShapeMismatch
from .tensor import Tensor

WHITENED = "whitened"
RAW = "raw"
WHITENED_NO_LOG = "whitened_no_log"
NIS = "nis"
VARIANTS = (WHITENED, RAW, WHITENED_NO_LOG, NIS)

CHECKPOINT_VERSION = "ndr-shkf-ckpt-1"


@dataclass(frozen=True)
class FeatureConfig:
    variant: str = WHITENED
    clip_bound: float = 10.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"unknown feature variant {self.variant!r}")
        if not self.clip_bound > 0:
            raise ConfigInvalid("clip_bound must be positive")
        if not self.eps > 0:
            raise ConfigInvalid("eps must be positive")

    def dim(self, n_x: int, n_z: int) -> int:
        gain = n_x * n_z
        if self.variant in (WHITENED, RAW):
            return 2 * n_z + gain
        if self.variant == WHITENED_NO_LOG:
            return n_z + gain
        return 1 + gain


def build_features(cfg: FeatureConfig, nu, S, K) -> Tensor:
    """Policy input ``y_k`` as a ``(..., dim, 1)`` column, clipped to ``±clip_bound``."""
    nu, S, K = tn.as_tensor(nu), tn.as_tensor(S), tn.as_tensor(K)
    n_z = S.shape[-1]
    vecK = tn.reshape(K, K.shape[:-2] + (K.shape[-2] * K.shape[-1], 1))
    if cfg.variant == RAW:
        parts = [nu, tn.diag(S), vecK]
    elif cfg.variant == NIS:
        Sinv = tn.inv(S)
        parts = [nu.T @ Sinv @ nu, vecK]
    else:
        L = tn.cholesky(S + cfg.eps * np.eye(n_z))
        nu_w = tn.triangular_solve(L, nu)
        if cfg.variant == WHITENED:
            parts = [nu_w, tn.log(tn.diag(L) + cfg.eps), vecK]
        else:
            parts = [nu_w, vecK]
    y = tn.concat(parts, axis=-2)
    return tn.clip(y, -cfg.clip_bound, cfg.clip_bound)


@dataclass(frozen=True)
class PolicyArch:
    n_x: int = 3
    n_z: int = 2
    feature_dim: int = 10
    depth: int = 3
    enc: tuple[int, int] = (32, 16)
    d_h: int = 32
    ctx: tuple[int, int] = (32, 32)
    dec: tuple[int, int] = (16, 32)
    head: tuple[int, int] = (16, 16)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigInvalid("GRU depth must be >= 1")
        object.__setattr__(self, "enc", tuple(self.enc))
        object.__setattr__(self, "ctx", tuple(self.ctx))
        object.__setattr__(self, "dec", tuple(self.dec))
        object.__setattr__(self, "head", tuple(self.head))

    @property
    def out_dim(self) -> int:
        return self.n_x + self.n_z

    @property
    def head_in(self) -> int:
        return self.ctx[-1] + (self.d_h if self.depth > 1 else 0)

    @classmethod
    def chaos(cls, depth: int = 3, features: FeatureConfig = FeatureConfig(), **kw) -> "PolicyArch":
        return cls(n_x=3, n_z=2, feature_dim=features.dim(3, 2), depth=depth, **kw)

    @classmethod
    def uav(cls, depth: int = 3, features: FeatureConfig = FeatureConfig(), **kw) -> "PolicyArch":
        kw.setdefault("head", (32, 32))
        return cls(n_x=19, n_z=6, feature_dim=features.dim(19, 6), depth=depth, **kw)

    def layer_shapes(self) -> dict[str, tuple[tuple[int, int], str]]:
        """``name -> ((out, in), init kind)`` for every weight matrix."""
        shapes: dict[str, tuple[tuple[int, int], str]] = {}
        shapes["enc1"] = ((self.enc[0], self.feature_dim), "relu")
        shapes["enc2"] = ((self.enc[1], self.enc[0]), "relu")
        for i in range(1, self.depth + 1):
            d_in = self.enc[1] if i == 1 else self.d_h
            shapes[f"gru{i}.W"] = ((3 * self.d_h, d_in), "gru")
            shapes[f"gru{i}.U"] = ((3 * self.d_h, self.d_h), "gru")
        shapes["ctx1"] = ((self.ctx[0], self.d_h), "relu")
        shapes["ctx2"] = ((self.ctx[1], self.ctx[0]), "relu")
        shapes["dec1"] = ((self.dec[0], self.ctx[1]), "relu")
        shapes["dec2"] = ((self.dec[1], self.dec[0]), "relu")
        shapes["dec3"] = ((self.feature_dim, self.dec[1]), "linear")
        shapes["pi1"] = ((self.head[0], self.head_in), "relu")
        shapes["pi2"] = ((self.head[1], self.head[0]), "relu")
        shapes["pi3"] = ((self.out_dim, self.head[1]), "linear")
        return shapes


def init_weights(arch: PolicyArch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal for ReLU layers, ``U(±1/sqrt(d_h))`` for GRU and output layers, zero biases."""
    bound = 1.0 / np.sqrt(arch.d_h)
    w: dict[str, np.ndarray] = {}
    for name, ((n_out, n_in), kind) in arch.layer_shapes().items():
        if kind == "relu":
            w_name = name + ".W"
            w[w_name] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
            w[name + ".b"] = np.zeros((n_out, 1))
        elif kind == "linear":
            w[name + ".W"] = rng.uniform(-bound, bound, (n_out, n_in))
            w[name + ".b"] = np.zeros((n_out, 1))
        else:
            w[name] = rng.uniform(-bound, bound, (n_out, n_in))
            if name.endswith(".W"):
                w[name[:-2] + ".b"] = np.zeros((n_out, 1))
    return w


def check_weights(arch: PolicyArch, weights: Mapping[str, np.ndarray]) -> None:
    expected = {k: v.shape for k, v in init_weights(arch, np.random.default_rng(0)).items()}
    if set(expected) != set(weights):
        raise ShapeMismatch(f"weight names differ: {sorted(set(expected) ^ set(weights))}")
    for k, s in expected.items():
        if np.shape(weights[k]) != s:
            raise ShapeMismatch(f"{k}: expected {s}, got {np.shape(weights[k])}")


# --- forward ----------------------------------------------------------------


def _linear(w, name, x):
    return w[name + ".W"] @ x + w[name + ".b"]


def _dense_relu(w, name, x):
    return tn.relu(_linear(w, name, x))


def gru_cell(W, U, b, x, h) -> Tensor:
    """Standard GRU update with stacked ``[z; r; n]`` gate parameters."""
    W, U, b, x, h = map(tn.as_tensor, (W, U, b, x, h))
    d = h.shape[-2]
    gx = W @ x + b
    gh = U @ h
    z = tn.sigmoid(gx[..., :d, :] + gh[..., :d, :])
    r = tn.sigmoid(gx[..., d : 2 * d, :] + gh[..., d : 2 * d, :])
    n = tn.tanh(gx[..., 2 * d :, :] + r * gh[..., 2 * d :, :])
    return n + z * (h - n)


@dataclass
class PolicyOutput:
    d: Tensor  # (..., n_x + n_z, 1)
    y_hat: Tensor | None
    hidden: list[Tensor]
    context: Tensor


def zero_state(arch: PolicyArch, batch_shape=()) -> list[Tensor]:
    return [Tensor(np.zeros(tuple(batch_shape) + (arch.d_h, 1))) for _ in range(arch.depth)]


def as_tensors(weights: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tn.as_tensor(v) for k, v in weights.items()}


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.tape is not None


def _forward_untracked(w, arch: PolicyArch, y, hidden, decode: bool) -> PolicyOutput:
    """Same arithmetic as the taped path on raw arrays (inference only)."""
    a = {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=float)) for k, v in w.items()}

    def lin(name, x):
        return a[name + ".W"] @ x + a[name + ".b"]

    def dense(name, x):
        return np.maximum(lin(name, x), 0.0)

    d_h = arch.d_h
    inp = dense("enc2", dense("enc1", y.data if isinstance(y, Tensor) else np.asarray(y, dtype=float)))
    new_hidden = []
    for i, h in enumerate(hidden, start=1):
        h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=float)
        gx = a[f"gru{i}.W"] @ inp + a[f"gru{i}.b"]
        gh = a[f"gru{i}.U"] @ h
        z = expit(gx[..., :d_h, :] + gh[..., :d_h, :])
        r = expit(gx[..., d_h : 2 * d_h, :] + gh[..., d_h : 2 * d_h, :])
        n = np.tanh(gx[..., 2 * d_h :, :] + r * gh[..., 2 * d_h :, :])
        h = n + z * (h - n)
        new_hidden.append(h)
        inp = h
    c = dense("ctx2", dense("ctx1", new_hidden[0]))
    p = np.concatenate([c, new_hidden[-1]], axis=-2) if arch.depth > 1 else c
    d = expit(lin("pi3", dense("pi2", dense("pi1", p))))
    y_hat = lin("dec3", dense("dec2", dense("dec1", c))) if decode else None
    tn._check(d, "policy")
    return PolicyOutput(Tensor(d), None if y_hat is None else Tensor(y_hat), [Tensor(h) for h in new_hidden], Tensor(c))


def policy_forward(w: Mapping[str, Tensor], arch: PolicyArch, y, hidden: list, decode: bool = True) -> PolicyOutput:
    """Encoder, GRU stack, context, policy head and (optionally) the decoder.

    The first GRU consumes the encoded features and each deeper GRU consumes
    the hidden state below it. The context is read from the first GRU only;
    the head sees ``[c; h_N]`` when ``depth > 1``. Untracked inputs take a
    plain-array path with identical arithmetic.
    """
    if len(hidden) != arch.depth:
        raise ShapeMismatch(f"expected {arch.depth} hidden states, got {len(hidden)}")
    if not (_tracked(y) or any(map(_tracked, hidden)) or any(map(_tracked, w.values()))):
        return _forward_untracked(w, arch, y, hidden, decode)
    e = _dense_relu(w, "enc2", _dense_relu(w, "enc1", y))
    new_hidden = []
    inp = e
    for i, h in enumerate(hidden, start=1):
        h = gru_cell(w[f"gru{i}.W"], w[f"gru{i}.U"], w[f"gru{i}.b"], inp, h)
        new_hidden.append(h)
        inp = h
    c = _dense_relu(w, "ctx2", _dense_relu(w, "ctx1", new_hidden[0]))
    p = tn.concat([c, new_hidden[-1]], axis=-2) if arch.depth > 1 else c
    logits = _linear(w, "pi3", _dense_relu(w, "pi2", _dense_relu(w, "pi1", p)))
    d = tn.sigmoid(logits)
    y_hat = None
    if decode:
        y_hat = _linear(w, "dec3", _dense_relu(w, "dec2", _dense_relu(w, "dec1", c)))
    return PolicyOutput(d, y_hat, new_hidden, c)


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    arch: PolicyArch
    features: FeatureConfig
    weights: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, arch: PolicyArch, features: FeatureConfig, weights, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(arch),
        "features": asdict(features),
        "tensors": entries,
        "meta": meta or {},
    }
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigInvalid(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    weights = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=int))
        weights[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    arch = PolicyArch(**manifest["arch"])
    check_weights(arch, weights)
    return Checkpoint(arch, FeatureConfig(**manifest["features"]), weights, manifest.get("meta", {}))
