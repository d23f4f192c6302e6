"""Lorenz / Rossler ground-truth trajectories with time-varying process noise
and heavy-tailed (two-component Gaussian mixture) measurement noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateObservation

LORENZ = "lorenz"
ROSSLER = "rossler"
LINEAR = "linear"
RANGE_BEARING = "range_bearing"


TRAIN_SPLIT, EVAL_SPLIT = 0, 1


def episode_rng(seed: int, episode: int, stream: int = 0, split: int = TRAIN_SPLIT) -> np.random.Generator:
    """Counter-based generator keyed by (seed, episode, stream, split).

    Streams separate the independent channels of an episode (initial state,
    process noise, measurement noise, ...) so draws never depend on the order
    in which episodes are simulated. The evaluation split is a disjoint
    namespace, so held-out episodes never coincide with training episodes
    even when both use the same seed.
    """
    key = (int(episode), int(stream)) if split == TRAIN_SPLIT else (int(episode), int(stream), int(split))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ChaosParams:
    system: str = LORENZ
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    a: float = 0.2
    b: float = 0.2
    c: float = 5.7
    dt: float = 0.01

    def __post_init__(self):
        if self.system not in (LORENZ, ROSSLER):
            raise ValueError(f"unknown system {self.system!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def observation(self) -> str:
        return LINEAR if self.system == LORENZ else RANGE_BEARING


@dataclass
class NoiseProfile:
    q_base: float = 0.01
    amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.ones(3))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_base: np.ndarray = field(default_factory=lambda: np.array([1.0, 2.0]))
    outlier_prob: float = 0.05
    outlier_scale: float = 5.0
    dt: float = 0.01

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        self.r_base = np.asarray(self.r_base, dtype=float)
        if self.q_base < 0:
            raise ValueError("q_base must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")
        if self.outlier_scale < 1.0:
            raise ValueError("outlier_scale must be >= 1")

    def q_diag(self, k) -> np.ndarray:
        """Per-axis process-noise variance at step ``k``."""
        s = np.sin(self.omega * (k * self.dt) + self.phase)
        return self.q_base * (1.0 + self.amplitude * s * s)


def random_profile(
    rng: np.random.Generator,
    *,
    amplitude_max: float,
    outlier_prob: float,
    outlier_scale: float,
    q_base: float = 0.01,
    r_base=(1.0, 2.0),
    dt: float = 0.01,
) -> NoiseProfile:
    """Draw per-episode harmonic parameters from their uniform ranges."""
    return NoiseProfile(
        q_base=q_base,
        amplitude=rng.uniform(0.0, amplitude_max, 3),
        omega=rng.uniform(0.1, 1.0, 3),
        phase=rng.uniform(0.0, 2.0 * np.pi, 3),
        r_base=np.array(r_base, dtype=float),
        outlier_prob=outlier_prob,
        outlier_scale=outlier_scale,
        dt=dt,
    )


def lorenz_train_profile(rng: np.random.Generator) -> NoiseProfile:
    return random_profile(rng, amplitude_max=0.2, outlier_prob=0.05, outlier_scale=5.0)


def rossler_test_profile(rng: np.random.Generator) -> NoiseProfile:
    return random_profile(rng, amplitude_max=1.0, outlier_prob=0.10, outlier_scale=10.0)


# --- dynamics ---------------------------------------------------------------


def deriv(params: ChaosParams, state: np.ndarray) -> np.ndarray:
    """ODE right-hand side; ``state`` has shape ``(..., 3)``."""
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    if params.system == LORENZ:
        out = (params.sigma * (y - x), x * (params.rho - z) - y, x * y - params.beta * z)
    else:
        out = (-y - z, x + params.a * y, params.b + z * (x - params.c))
    return np.stack(out, axis=-1)


def deriv_jacobian(params: ChaosParams, state: np.ndarray) -> np.ndarray:
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    J = np.zeros(state.shape + (3,))
    if params.system == LORENZ:
        J[..., 0, 0] = -params.sigma
        J[..., 0, 1] = params.sigma
        J[..., 1, 0] = params.rho - z
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -x
        J[..., 2, 0] = y
        J[..., 2, 1] = x
        J[..., 2, 2] = -params.beta
    else:
        J[..., 0, 1] = -1.0
        J[..., 0, 2] = -1.0
        J[..., 1, 0] = 1.0
        J[..., 1, 1] = params.a
        J[..., 2, 0] = z
        J[..., 2, 2] = x - params.c
    return J


def rk4_step(params: ChaosParams, state: np.ndarray, dt: float | None = None) -> np.ndarray:
    h = params.dt if dt is None else dt
    k1 = deriv(params, state)
    k2 = deriv(params, state + 0.5 * h * k1)
    k3 = deriv(params, state + 0.5 * h * k2)
    k4 = deriv(params, state + h * k3)
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_jacobian(params: ChaosParams, state: np.ndarray, dt: float | None = None):
    """One RK4 step and its exact state Jacobian (tangent propagated through the stages)."""
    h = params.dt if dt is None else dt
    eye = np.eye(3)
    k1 = deriv(params, state)
    J1 = deriv_jacobian(params, state)
    s2 = state + 0.5 * h * k1
    k2 = deriv(params, s2)
    J2 = deriv_jacobian(params, s2) @ (eye + 0.5 * h * J1)
    s3 = state + 0.5 * h * k2
    k3 = deriv(params, s3)
    J3 = deriv_jacobian(params, s3) @ (eye + 0.5 * h * J2)
    s4 = state + h * k3
    k4 = deriv(params, s4)
    J4 = deriv_jacobian(params, s4) @ (eye + h * J3)
    nxt = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    F = eye + (h / 6.0) * (J1 + 2.0 * J2 + 2.0 * J3 + J4)
    return nxt, F


# --- noise ------------------------------------------------------------------


def sample_process_noise(profile: NoiseProfile, k: int, rng: np.random.Generator):
    """Return ``(noise, q)`` where ``noise ~ N(0, diag(q))`` and ``q = q_i(k)``."""
    q = profile.q_diag(k)
    return np.sqrt(q) * rng.standard_normal(q.shape), q


def sample_measurement_noise(profile: NoiseProfile, rng: np.random.Generator, size=None):
    """Draw from the mixture; returns ``(noise, is_outlier)``.

    One Bernoulli(outlier_prob) component choice per measurement vector.
    """
    shape = () if size is None else (size,)
    is_out = rng.random(shape) < profile.outlier_prob
    scale = np.where(is_out, np.sqrt(profile.outlier_scale), 1.0)
    n = rng.standard_normal(shape + profile.r_base.shape)
    return n * np.sqrt(profile.r_base) * np.asarray(scale)[..., None], is_out


def wrap(angle):
    """Wrap into (-pi, pi]."""
    return angle - 2.0 * np.pi * np.ceil((angle - np.pi) / (2.0 * np.pi))


def observe(kind: str, state: np.ndarray) -> np.ndarray:
    if kind == LINEAR:
        return state[..., [0, 2]]
    if kind == RANGE_BEARING:
        x, y = state[..., 0], state[..., 1]
        if np.any((x == 0.0) & (y == 0.0)):
            raise DegenerateObservation("range-bearing is undefined at the origin")
        return np.stack([np.hypot(x, y), np.arctan2(y, x)], axis=-1)
    raise ValueError(f"unknown observation model {kind!r}")


# --- episodes ---------------------------------------------------------------


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 3): x_1 .. x_T
    measurements: np.ndarray  # (T, 2): z_1 .. z_T
    true_q: np.ndarray  # (T, 3): variance of the noise that produced x_k
    outliers: np.ndarray  # (T,) bool
    initial_state: np.ndarray  # x_0
    diverged: bool = False
    diverged_at: int | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "x1", "x2", "x3", "z1", "z2", "q1", "q2", "q3"])
            for k in range(len(self)):
                w.writerow([k + 1, *(repr(float(v)) for v in (*self.states[k], *self.measurements[k], *self.true_q[k]))])


def initial_box(params: ChaosParams) -> tuple[np.ndarray, np.ndarray]:
    """Bounds of the uniform initial-state distribution."""
    if params.system == LORENZ:
        return np.array([-15.0, -15.0, 10.0]), np.array([15.0, 15.0, 40.0])
    return np.array([-10.0, -10.0, 0.0]), np.array([10.0, 10.0, 10.0])


def initial_prior(params: ChaosParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the initial-state distribution."""
    lo, hi = initial_box(params)
    return (lo + hi) / 2.0, np.diag((hi - lo) ** 2 / 12.0)


def initial_state(params: ChaosParams, rng: np.random.Generator) -> np.ndarray:
    lo, hi = initial_box(params)
    return rng.uniform(lo, hi)


def simulate(
    params: ChaosParams,
    profiles: list[NoiseProfile],
    x0: np.ndarray,
    w_std: np.ndarray,
    out_u: np.ndarray,
    v_std: np.ndarray,
    escape_bound: float = 1e6,
):
    """Integrate a batch of episodes from pre-drawn standard-normal noise.

    ``x0`` is ``(B, 3)``, ``w_std`` ``(B, T, 3)``, ``out_u`` ``(B, T)`` uniforms
    for the mixture component, ``v_std`` ``(B, T, 2)``. Returns
    ``(states, measurements, q, outliers, diverged_at)``; ``diverged_at`` is
    ``-1`` for episodes whose ground truth stayed bounded, and escaped
    episodes are NaN from the escape step on.
    """
    B, T = out_u.shape
    amp = np.stack([p.amplitude for p in profiles])
    om = np.stack([p.omega for p in profiles])
    ph = np.stack([p.phase for p in profiles])
    qb = np.array([p.q_base for p in profiles])[:, None]
    rb = np.stack([p.r_base for p in profiles])
    eps = np.array([p.outlier_prob for p in profiles])[:, None]
    eta = np.array([p.outlier_scale for p in profiles])[:, None]
    dts = np.array([p.dt for p in profiles])[:, None]

    k = np.arange(T)[None, :, None]
    s = np.sin(om[:, None, :] * (k * dts[:, :, None]) + ph[:, None, :])
    q = qb[:, :, None] * (1.0 + amp[:, None, :] * s * s)
    outliers = out_u < eps
    v = v_std * np.sqrt(rb)[:, None, :] * np.where(outliers, np.sqrt(eta), 1.0)[..., None]
    w = np.sqrt(q) * w_std

    states = np.full((B, T, 3), np.nan)
    meas = np.full((B, T, 2), np.nan)
    diverged_at = np.full(B, -1)
    x = np.array(x0, dtype=float)
    alive = np.ones(B, dtype=bool)
    kind = params.observation
    with np.errstate(all="ignore"):
        for t in range(T):
            x = rk4_step(params, x) + w[:, t]
            ok = np.all(np.abs(x) < escape_bound, axis=-1)
            newly = alive & ~ok
            diverged_at[newly] = t
            alive &= ok
            x = np.where(alive[:, None], x, np.nan)
            states[:, t] = x
            if kind == LINEAR:
                z = x[:, [0, 2]]
            else:
                z = np.stack([np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])], axis=-1)
            z = z + v[:, t]
            if kind == RANGE_BEARING:
                z[:, 1] = wrap(z[:, 1])
            meas[:, t] = z
    return states, meas, q, outliers, diverged_at


def generate_trajectory(
    params: ChaosParams,
    profile: NoiseProfile,
    T: int,
    rng: np.random.Generator,
    x0: np.ndarray | None = None,
    escape_bound: float = 1e6,
) -> Trajectory:
    """Simulate ``T`` steps: RK4, additive process noise, then a measurement.

    Draw order from ``rng``: initial state (unless given), process noise
    ``(T, 3)``, component uniforms ``(T,)``, measurement noise ``(T, 2)``.
    A ground-truth escape (non-finite or beyond ``escape_bound``) flags the
    trajectory instead of raising.
    """
    x0 = initial_state(params, rng) if x0 is None else np.asarray(x0, dtype=float)
    w_std = rng.standard_normal((T, 3))
    out_u = rng.random(T)
    v_std = rng.standard_normal((T, 2))
    states, meas, q, outl, dat = simulate(params, [profile], x0[None], w_std[None], out_u[None], v_std[None], escape_bound)
    d = int(dat[0])
    return Trajectory(states[0], meas[0], q[0], outl[0], x0.copy(), d >= 0, d if d >= 0 else None)


@dataclass
class EpisodeBatch:
    """Episodes sharing one system, ready for batched filtering."""

    x0: np.ndarray  # (B, 3) true initial state
    x_hat0: np.ndarray  # (B, 3) filter initial estimate
    P0: np.ndarray  # (3, 3)
    states: np.ndarray  # (B, T, 3)
    measurements: np.ndarray  # (B, T, 2)
    true_q: np.ndarray  # (B, T, 3)
    outliers: np.ndarray  # (B, T)
    diverged_at: np.ndarray  # (B,), -1 when the ground truth stayed bounded
    episode_ids: np.ndarray  # (B,)

    @property
    def gt_diverged(self) -> np.ndarray:
        return self.diverged_at >= 0

    def __len__(self) -> int:
        return self.x0.shape[0]

    def subset(self, idx) -> "EpisodeBatch":
        return EpisodeBatch(
            self.x0[idx], self.x_hat0[idx], self.P0, self.states[idx], self.measurements[idx],
            self.true_q[idx], self.outliers[idx], self.diverged_at[idx], self.episode_ids[idx],
        )


PROFILES = {"train": lorenz_train_profile, "test": rossler_test_profile}


def make_episodes(
    params: ChaosParams,
    episode_ids,
    T: int,
    seed: int,
    noise: str = "train",
    init_sd: float | None = None,
    escape_bound: float = 1e6,
    split: int = TRAIN_SPLIT,
) -> EpisodeBatch:
    """Generate episodes keyed by ``(seed, episode id)``.

    Stream 0 draws the noise profile and initial state, stream 1 the
    process/measurement noise. By default the filter starts from the prior
    of the initial-state distribution (its mean and covariance). With
    ``init_sd`` set it starts at ``x0 + init_sd * N(0, I)`` drawn from
    stream 2, with ``P0 = init_sd**2 I``. Regenerating any single id
    reproduces it bit-exactly. ``split`` selects the training or the
    evaluation namespace.
    """
    ids = np.asarray(list(episode_ids), dtype=np.int64)
    draw_profile = PROFILES[noise]
    profiles, x0s, ws, us, vs, x_hat0 = [], [], [], [], [], []
    for e in ids:
        r0 = episode_rng(seed, int(e), 0, split)
        profiles.append(replace_dt(draw_profile(r0), params.dt))
        x0s.append(initial_state(params, r0))
        r1 = episode_rng(seed, int(e), 1, split)
        ws.append(r1.standard_normal((T, 3)))
        us.append(r1.random(T))
        vs.append(r1.standard_normal((T, 2)))
        if init_sd is None:
            x_hat0.append(initial_prior(params)[0])
        else:
            x_hat0.append(x0s[-1] + init_sd * episode_rng(seed, int(e), 2, split).standard_normal(3))
    P0 = initial_prior(params)[1] if init_sd is None else init_sd**2 * np.eye(3)
    B = len(ids)
    if B == 0:
        empty = np.zeros((0, T, 3))
        return EpisodeBatch(np.zeros((0, 3)), np.zeros((0, 3)), P0, empty,
                            np.zeros((0, T, 2)), empty.copy(), np.zeros((0, T), bool), np.zeros(0, int), ids)
    x0 = np.stack(x0s)
    states, meas, q, outl, dat = simulate(params, profiles, x0, np.stack(ws), np.stack(us), np.stack(vs), escape_bound)
    return EpisodeBatch(x0, np.stack(x_hat0), P0, states, meas, q, outl, dat, ids)


def replace_dt(profile: NoiseProfile, dt: float) -> NoiseProfile:
    profile.dt = dt
    return profile
