"""19-state quadrotor models, quaternion utilities and synthetic flight logs.

State layout (indices): position ``r`` 0-2 (Earth frame), velocity ``v`` 3-5
(body frame), attitude quaternion ``q`` 6-9 as ``(w, x, y, z)``, body rates
``omega`` 10-12, accelerometer bias 13-15, gyro bias 16-18. The body frame is
+Z up and gravity is ``[0, 0, -g]`` in the Earth frame.

All functions accept leading batch axes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import GimbalLockProximity
from .kalman import SystemModel

R_, V_, Q_, W_, BA_, BG_ = slice(0, 3), slice(3, 6), slice(6, 10), slice(10, 13), slice(13, 16), slice(16, 19)
N_X, N_Z = 19, 6
GIMBAL_MARGIN = 1e-6


@dataclass(frozen=True)
class QdroneParams:
    M: float = 1.121
    g: float = 9.81
    J: tuple = (1.00e-2, 8.20e-3, 1.48e-2)
    L_roll: float = 0.2136
    L_pitch: float = 0.1758
    K_f: float = 5.11
    K_t: float = 0.0487
    u_hover: float = 0.538
    D: tuple = (0.001, 0.001, 0.001)

    @property
    def J_diag(self) -> np.ndarray:
        return np.asarray(self.J, dtype=float)

    @property
    def D_diag(self) -> np.ndarray:
        return np.asarray(self.D, dtype=float)


# nominal filter tuning
P0_DIAG = np.concatenate([np.full(3, 1e-1), np.full(3, 1.0), np.full(4, 1e-1), np.full(3, 1e-1), np.full(3, 1e-4), np.full(3, 1e-3)])
Q_DIAG = np.concatenate([np.full(3, 1e-2), np.full(3, 1e-1), np.full(4, 1e-2), np.full(3, 1e-1), np.full(3, 1e-5), np.full(3, 1e-5)])
R_DIAG = np.full(6, 5e-2)
DT = 1e-3


# --- quaternions ------------------------------------------------------------


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product of ``(w, x, y, z)`` quaternions."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def dcm_from_quat(q) -> np.ndarray:
    """Body-to-Earth rotation matrix."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def euler_from_quat(q, strict: bool = True) -> np.ndarray:
    """Z-Y-X (yaw-pitch-roll) angles ``(phi, theta, psi)``.

    Raises :class:`GimbalLockProximity` when pitch is within ``1e-6`` of
    ``±pi/2`` and ``strict`` is set.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    s = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    theta = np.arcsin(s)
    if strict and np.any(np.abs(theta) > np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLockProximity("pitch too close to ±pi/2 for a 3-2-1 Euler read-out")
    phi = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    psi = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return np.stack([phi, theta, psi], axis=-1)


def quat_from_euler(angles) -> np.ndarray:
    a = np.asarray(angles, dtype=float)
    hr, hp, hy = a[..., 0] / 2, a[..., 1] / 2, a[..., 2] / 2
    cr, sr, cp, sp, cy, sy = np.cos(hr), np.sin(hr), np.cos(hp), np.sin(hp), np.cos(hy), np.sin(hy)
    return np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )


def _pure(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def _rotT(R, v):
    """``R^T v`` for stacked matrices and vectors."""
    return np.einsum("...ji,...j->...i", R, v)


def _rot(R, v):
    return np.einsum("...ij,...j->...i", R, v)


# --- motor mixing and derivatives ------------------------------------------


def mixing_matrix(p: QdroneParams = QdroneParams()) -> np.ndarray:
    kr = p.K_f * p.L_roll / 2.0
    kp = p.K_f * p.L_pitch / 2.0
    return np.array(
        [
            [p.K_f, p.K_f, p.K_f, p.K_f],
            [-kr, -kr, kr, kr],
            [kp, -kp, kp, -kp],
            [p.K_t, -p.K_t, -p.K_t, p.K_t],
        ]
    )


def mix_motor_commands(delta, p: QdroneParams = QdroneParams()):
    """Motor commands in ``[0, 1]`` to total thrust ``F`` and body torques ``tau``."""
    out = np.einsum("ij,...j->...i", mixing_matrix(p), np.asarray(delta, dtype=float))
    return out[..., 0], out[..., 1:]


def kinematic_deriv(x, u_imu, p: QdroneParams = QdroneParams()) -> np.ndarray:
    """IMU-driven kinematics; ``u_imu = [a_imu; omega_imu]``."""
    x, u = np.asarray(x, dtype=float), np.asarray(u_imu, dtype=float)
    v, q = x[..., V_], x[..., Q_]
    a = u[..., 0:3] - x[..., BA_]
    w = u[..., 3:6] - x[..., BG_]
    R = dcm_from_quat(q)
    grav = np.array([0.0, 0.0, -p.g])
    out = np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_X,)))
    out[..., R_] = _rot(R, v)
    out[..., V_] = a + _rotT(R, np.broadcast_to(grav, v.shape)) - np.cross(w, v)
    out[..., Q_] = 0.5 * quat_mul(q, _pure(w))
    return out


def specific_force(x, thrust, p: QdroneParams = QdroneParams()) -> np.ndarray:
    """Body specific force ``[0, 0, F/M] - D v``."""
    x = np.asarray(x, dtype=float)
    v = x[..., V_]
    f = -p.D_diag * v
    f = f + np.stack([np.zeros_like(thrust), np.zeros_like(thrust), thrust / p.M], axis=-1)
    return f


def dynamic_deriv(x, u_control, p: QdroneParams = QdroneParams()) -> np.ndarray:
    """Rigid-body dynamics driven by ``u_control = [F, tau_x, tau_y, tau_z]``."""
    x, u = np.asarray(x, dtype=float), np.asarray(u_control, dtype=float)
    v, q, w = x[..., V_], x[..., Q_], x[..., W_]
    F, tau = u[..., 0], u[..., 1:4]
    R = dcm_from_quat(q)
    J = p.J_diag
    grav = np.array([0.0, 0.0, -p.g])
    out = np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_X,)))
    out[..., R_] = _rot(R, v)
    out[..., V_] = specific_force(x, F, p) + _rotT(R, np.broadcast_to(grav, v.shape)) - np.cross(w, v)
    out[..., Q_] = 0.5 * quat_mul(q, _pure(w))
    out[..., W_] = (tau - np.cross(w, J * w)) / J
    return out


def rk4(deriv, x, u, dt, p: QdroneParams = QdroneParams()) -> np.ndarray:
    """RK4 step with the input held constant, then quaternion renormalization."""
    k1 = deriv(x, u, p)
    k2 = deriv(x + 0.5 * dt * k1, u, p)
    k3 = deriv(x + 0.5 * dt * k2, u, p)
    k4 = deriv(x + dt * k3, u, p)
    out = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out[..., Q_] = quat_normalize(out[..., Q_])
    return out


def observe_pose(x, strict: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[..., R_], euler_from_quat(x[..., Q_], strict)], axis=-1)


def observe_imu(x, delta, p: QdroneParams = QdroneParams()) -> np.ndarray:
    """Predicted accelerometer and gyro readings under motor commands ``delta``."""
    x = np.asarray(x, dtype=float)
    F, _ = mix_motor_commands(delta, p)
    return np.concatenate([specific_force(x, F, p) + x[..., BA_], x[..., W_] + x[..., BG_]], axis=-1)


# --- filter models ----------------------------------------------------------


class _UavModel(SystemModel):
    n_x, n_z = N_X, N_Z

    def __init__(self, params: QdroneParams = QdroneParams(), dt: float = DT, q_diag=Q_DIAG, r_diag=R_DIAG):
        self.params = params
        self.dt = dt
        self.q_nominal = np.asarray(q_diag, dtype=float)
        self.r_nominal = np.asarray(r_diag, dtype=float)


class KinematicModel(_UavModel):
    """Formulation driven by IMU inputs ``u = [a_imu; omega_imu]``, observing pose."""

    angle_channels = (3, 4, 5)

    def f(self, x, u=None, dt=None):
        return rk4(kinematic_deriv, np.asarray(x, dtype=float), u, self.dt if dt is None else dt, self.params)

    def h(self, x, u=None):
        return observe_pose(x, strict=tn._STRICT[0])


class DynamicModel(_UavModel):
    """Formulation driven by motor commands ``u = delta``, observing the IMU."""

    angle_channels = ()

    def f(self, x, u=None, dt=None):
        F, tau = mix_motor_commands(u, self.params)
        uc = np.concatenate([F[..., None], tau], axis=-1)
        return rk4(dynamic_deriv, np.asarray(x, dtype=float), uc, self.dt if dt is None else dt, self.params)

    def h(self, x, u=None):
        return observe_imu(x, u, self.params)


def initial_estimate(pose) -> np.ndarray:
    """Seed position and attitude from a pose; velocities, rates and biases zero."""
    pose = np.asarray(pose, dtype=float)
    x = np.zeros(pose.shape[:-1] + (N_X,))
    x[..., R_] = pose[..., 0:3]
    x[..., Q_] = quat_from_euler(pose[..., 3:6])
    return x


# --- synthetic flight logs --------------------------------------------------


@dataclass
class FlightLog:
    t: np.ndarray  # (T,)
    delta: np.ndarray  # (T, 4) motor commands applied over [t_k, t_k + dt)
    imu: np.ndarray  # (T, 6) clean IMU [a; omega] at t_k
    states: np.ndarray  # (T, 19) true state at t_k
    dt: float = DT

    @property
    def pose(self) -> np.ndarray:
        return observe_pose(self.states, strict=False)

    def __len__(self) -> int:
        return self.t.shape[0]

    def to_csv(self, path) -> None:
        cols = ["t", "d1", "d2", "d3", "d4", "ax", "ay", "az", "wx", "wy", "wz", "x", "y", "z", "roll", "pitch", "yaw"]
        pose = self.pose
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for k in range(len(self)):
                w.writerow([repr(float(self.t[k])), *map(repr, map(float, self.delta[k])), *map(repr, map(float, self.imu[k])),
                            *map(repr, map(float, pose[k]))])


@dataclass
class Maneuver:
    """Reference path: a circle, optionally combined with steps and a vertical bob."""

    radius: float = 1.0
    period: float = 5.0
    height: float = 1.0
    phase: float = 0.0
    bob: float = 0.0
    bob_period: float = 3.0
    yaw_rate: float = 0.0
    steps: list = field(default_factory=list)  # (time, dx, dy, dz)

    def reference(self, t):
        w = 2 * np.pi / self.period
        c, s = np.cos(w * t + self.phase), np.sin(w * t + self.phase)
        pos = np.array([self.radius * c, self.radius * s, self.height])
        vel = np.array([-self.radius * w * s, self.radius * w * c, 0.0])
        acc = np.array([-self.radius * w * w * c, -self.radius * w * w * s, 0.0])
        if self.bob:
            wb = 2 * np.pi / self.bob_period
            pos[2] += self.bob * np.sin(wb * t)
            vel[2] += self.bob * wb * np.cos(wb * t)
            acc[2] -= self.bob * wb * wb * np.sin(wb * t)
        for ts, dx, dy, dz in self.steps:
            if t >= ts:
                pos = pos + np.array([dx, dy, dz])
        return pos, vel, acc, self.yaw_rate * t


def _vee(S):
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def tracking_controller(x, ref, p: QdroneParams = QdroneParams(), gains=(4.0, 3.0, 100.0, 16.0)) -> np.ndarray:
    """Geometric position/attitude controller returning motor commands in ``[0, 1]``.

    ``x`` is ``(..., 19)``; ``ref = (pos, vel, acc, yaw)`` with matching
    leading axes. Attitude gains are per unit inertia.
    """
    kx, kv, kR, kw = gains
    pos_d, vel_d, acc_d, yaw_d = (np.asarray(a, dtype=float) for a in ref)
    R = dcm_from_quat(x[..., Q_])
    v_e = _rot(R, x[..., V_])
    a_cmd = acc_d + kx * (pos_d - x[..., R_]) + kv * (vel_d - v_e)
    f_des = p.M * (a_cmd + np.array([0.0, 0.0, p.g]))
    F = np.sum(f_des * R[..., :, 2], axis=-1)
    b3 = f_des / np.linalg.norm(f_des, axis=-1, keepdims=True)
    c1 = np.stack([np.cos(yaw_d), np.sin(yaw_d), np.zeros_like(yaw_d)], axis=-1)
    b2 = np.cross(b3, c1)
    b2 /= np.linalg.norm(b2, axis=-1, keepdims=True)
    Rd = np.stack([np.cross(b2, b3), b2, b3], axis=-1)
    eR = 0.5 * _vee(np.swapaxes(Rd, -1, -2) @ R - np.swapaxes(R, -1, -2) @ Rd)
    w = x[..., W_]
    J = p.J_diag
    tau = J * (-kR * eR - kw * w) + np.cross(w, J * w)
    wrench = np.concatenate([F[..., None], tau], axis=-1)
    delta = np.einsum("ij,...j->...i", np.linalg.inv(mixing_matrix(p)), wrench)
    return np.clip(delta, 0.0, 1.0)


def generate_flight_logs(maneuvers: list, duration: float, p: QdroneParams = QdroneParams(), dt: float = DT) -> list[FlightLog]:
    """Fly the control-driven model along each maneuver; all logs are simulated together."""
    T = int(round(duration / dt))
    n = len(maneuvers)
    x = np.zeros((n, N_X))
    for i, m in enumerate(maneuvers):
        pos0, _, _, yaw0 = m.reference(0.0)
        x[i, R_] = pos0
        x[i, Q_] = quat_from_euler([0.0, 0.0, yaw0])
    ts = np.arange(T) * dt
    deltas = np.empty((n, T, 4))
    imu = np.empty((n, T, 6))
    states = np.empty((n, T, N_X))
    for k in range(T):
        refs = [m.reference(ts[k]) for m in maneuvers]
        ref = tuple(np.stack([np.asarray(r[j], dtype=float) for r in refs]) for j in range(4))
        delta = tracking_controller(x, ref, p)
        F, tau = mix_motor_commands(delta, p)
        states[:, k] = x
        deltas[:, k] = delta
        imu[:, k] = observe_imu(x, delta, p)
        x = rk4(dynamic_deriv, x, np.concatenate([F[:, None], tau], axis=-1), dt, p)
    return [FlightLog(ts.copy(), deltas[i], imu[i], states[i], dt) for i in range(n)]


def generate_flight_log(maneuver: Maneuver, duration: float, p: QdroneParams = QdroneParams(), dt: float = DT) -> FlightLog:
    return generate_flight_logs([maneuver], duration, p, dt)[0]


def benchmark_maneuvers() -> list[Maneuver]:
    """Three circular hold-out paths."""
    return [
        Maneuver(radius=1.0, period=5.0, height=1.0),
        Maneuver(radius=0.8, period=4.0, height=1.2, phase=np.pi / 3),
        Maneuver(radius=1.2, period=6.0, height=0.8, phase=np.pi, yaw_rate=0.2),
    ]


def training_maneuvers(n: int, rng: np.random.Generator) -> list[Maneuver]:
    """Unstructured paths: circles of random size with vertical bobbing and step inputs."""
    out = []
    for _ in range(n):
        steps = [(float(rng.uniform(1, 15)), *rng.uniform(-0.5, 0.5, 3)) for _ in range(3)]
        out.append(
            Maneuver(
                radius=float(rng.uniform(0.3, 1.5)),
                period=float(rng.uniform(3.0, 8.0)) * rng.choice([-1.0, 1.0]),
                height=float(rng.uniform(0.5, 1.5)),
                phase=float(rng.uniform(0, 2 * np.pi)),
                bob=float(rng.uniform(0, 0.3)),
                bob_period=float(rng.uniform(2, 5)),
                yaw_rate=float(rng.uniform(-0.3, 0.3)),
                steps=sorted(steps),
            )
        )
    return out


# --- domain randomization ---------------------------------------------------


@dataclass(frozen=True)
class Magnitudes:
    """Per-episode degradation magnitudes; all zero leaves the signals untouched."""

    sigma_meas: float = 0.0
    sigma_meas_out: float = 0.0
    eps_meas: float = 0.0
    sigma_inp: float = 0.0
    sigma_inp_out: float = 0.0
    eps_inp: float = 0.0
    sigma_sf: float = 0.0
    sigma_bias: float = 0.0
    sigma_walk: float = 0.0
    vib_amplitude: float = 0.0
    vib_omega: float = 0.0
    sigma_vib: float = 0.0


@dataclass(frozen=True)
class DegradationConfig:
    """Maxima of the stochastic degradation models; magnitudes are drawn ``U(ratio * max, max)``.

    Outlier probabilities and the vibration frequency are held at their
    stated values rather than sampled.
    """

    sigma_meas: float = 1.0
    sigma_meas_out: float = 5.0
    eps_meas: float = 0.05
    sigma_inp: float = 0.1
    sigma_inp_out: float = 5.0
    eps_inp: float = 0.01
    sigma_sf: float = 1e-3
    sigma_bias: float = 1e-3
    sigma_walk: float = 1e-5
    vib_amplitude: float = 0.1
    vib_omega: float = 628.0
    sigma_vib: float = 1.0
    ratio: float = 0.5

    FIXED = ("eps_meas", "eps_inp", "vib_omega")

    def sample(self, rng: np.random.Generator) -> Magnitudes:
        vals = {}
        for name in Magnitudes.__dataclass_fields__:
            top = getattr(self, name)
            vals[name] = top if name in self.FIXED else float(rng.uniform(self.ratio * top, top))
        return Magnitudes(**vals)

    def maxima(self) -> Magnitudes:
        return Magnitudes(**{n: getattr(self, n) for n in Magnitudes.__dataclass_fields__})


def _mixture(rng, shape, sigma, sigma_out, eps):
    """Gaussian mixture noise with one outlier draw per vector (last axis)."""
    out = rng.random(shape[:-1]) < eps
    std = np.where(out, sigma_out, sigma)[..., None]
    return std * rng.standard_normal(shape)


def degrade_uav_signals(z, u, rng: np.random.Generator, mag: Magnitudes, z_scale=None, dt: float = DT, k0: int = 0):
    """Degrade a pose stream ``z`` ``(T, 6)`` and an IMU stream ``u`` ``(T, 6)``.

    Position channels get mixture noise, attitude channels Gaussian noise
    (then wrapped). The input path is
    ``(u + v_inp) * (1 + s) + b_init + b_walk + v_vib``. ``z_scale`` (shape
    ``(T,)``) multiplies the measurement noise standard deviation per step.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    T = z.shape[0]
    v_pos = _mixture(rng, (T, 3), mag.sigma_meas, mag.sigma_meas_out, mag.eps_meas)
    v_att = mag.sigma_meas * rng.standard_normal((T, 3))
    v_meas = np.concatenate([v_pos, v_att], axis=-1)
    if z_scale is not None:
        v_meas = v_meas * np.asarray(z_scale, dtype=float)[:, None]
    z_out = z + v_meas
    z_out[:, 3:6] = np.angle(np.exp(1j * z_out[:, 3:6]))

    n_u = u.shape[-1]
    v_inp = _mixture(rng, (T, n_u), mag.sigma_inp, mag.sigma_inp_out, mag.eps_inp)
    s = mag.sigma_sf * rng.standard_normal(n_u)
    b_init = mag.sigma_bias * rng.standard_normal(n_u)
    b_walk = np.cumsum(mag.sigma_walk * rng.standard_normal((T, n_u)), axis=0)
    k = k0 + np.arange(1, T + 1)
    envelope = 1.0 + mag.vib_amplitude * np.sin(mag.vib_omega * k * dt) ** 2
    v_vib = mag.sigma_vib * rng.standard_normal((T, n_u)) * envelope[:, None]
    u_out = (u + v_inp) * (1.0 + s) + b_init + b_walk + v_vib
    return z_out, u_out


# --- training windows -------------------------------------------------------


class TrainingWindows:
    """Random overlapping windows over a set of flight logs.

    A window start is drawn uniformly over every valid ``(log, start)``
    pair, so longer logs are sampled in proportion to their size.
    """

    def __init__(self, logs: list[FlightLog], seed: int = 0, drcfg: DegradationConfig = DegradationConfig(),
                 batch_size: int = 128, model: KinematicModel | None = None):
        if not logs:
            raise ValueError("need at least one flight log")
        self.logs, self.seed, self.drcfg, self.batch_size = logs, seed, drcfg, batch_size
        self.model = model or KinematicModel()

    @classmethod
    def synthetic(cls, cfg) -> "TrainingWindows":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
        logs = generate_flight_logs(training_maneuvers(cfg.uav_logs, rng), cfg.uav_log_seconds)
        return cls(logs, cfg.seed, DegradationConfig(ratio=cfg.drop_ratio), cfg.batch_size)

    def valid_starts(self, T: int) -> np.ndarray:
        """Number of valid starts per log for windows of ``T`` steps plus the initial sample."""
        return np.array([max(len(log) - T, 0) for log in self.logs])

    def sample_starts(self, rng: np.random.Generator, n: int, T: int):
        counts = self.valid_starts(T)
        total = counts.sum()
        if total == 0:
            raise ValueError(f"no log is longer than {T} steps")
        flat = rng.integers(0, total, size=n)
        edges = np.cumsum(counts)
        which = np.searchsorted(edges, flat, side="right")
        start = flat - np.concatenate([[0], edges[:-1]])[which]
        return which, start

    def batch(self, batch_index: int, T: int):
        from .train import BatchSpec

        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 11, batch_index]))
        which, start = self.sample_starts(rng, self.batch_size, T)
        Z, U, X, X0 = [], [], [], []
        for i, s in zip(which, start):
            log = self.logs[i]
            truth = log.states[s : s + T + 1]
            z, u = degrade_uav_signals(observe_pose(truth[1:], strict=False), log.imu[s : s + T], rng,
                                       self.drcfg.sample(rng), dt=log.dt, k0=int(s))
            Z.append(z)
            U.append(u)
            X.append(truth[1:])
            X0.append(initial_estimate(observe_pose(truth[0], strict=False)))
        return BatchSpec(self.model, np.stack(X0), np.diag(P0_DIAG), np.stack(Z), np.stack(X), np.stack(U), self.model.dt)
