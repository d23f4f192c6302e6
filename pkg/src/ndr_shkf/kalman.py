"""EKF and fading-memory (Sage-Husa) recursions over differentiable models.

Filter quantities are :class:`~ndr_shkf.tensor.Tensor` objects with column
vectors of shape ``(..., n, 1)``; any leading axes are batch axes. The same
functions therefore serve single-trajectory inference, batched Monte-Carlo
evaluation, and taped training rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import chaos
from . import tensor as tn
from .errors import SingularInnovationCovariance
from .tensor import Tensor

# --- models -----------------------------------------------------------------


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], point, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``point``.

    ``fn`` maps ``(..., n)`` to ``(..., m)`` and must broadcast over leading
    axes; the result has shape ``(..., m, n)``.
    """
    x = np.asarray(point, dtype=np.float64)
    n = x.shape[-1]
    E = np.eye(n) * step
    fp = fn(x[..., None, :] + E)
    fm = fn(x[..., None, :] - E)
    return np.swapaxes(fp - fm, -1, -2) / (2.0 * step)


class SystemModel:
    """Discrete-time process and observation model.

    Subclasses implement the numpy maps :meth:`f` and :meth:`h` on
    ``(..., n)`` arrays. :meth:`propagate` and :meth:`measure` lift them onto
    the tape using numeric Jacobians; models with closed-form tape versions
    override those two methods so second-order terms are differentiated too.
    """

    n_x: int
    n_z: int
    angle_channels: tuple[int, ...] = ()
    q_nominal: np.ndarray
    r_nominal: np.ndarray
    dt: float = 1.0
    jacobian_step: float = 1e-6

    def f(self, x: np.ndarray, u=None, dt: float | None = None) -> np.ndarray:
        raise NotImplementedError

    def h(self, x: np.ndarray, u=None) -> np.ndarray:
        raise NotImplementedError

    def jacobian_F(self, x, u=None, dt=None) -> np.ndarray:
        uu = None if u is None else np.asarray(u)[..., None, :]
        return numeric_jacobian(lambda p: self.f(p, uu, dt), x, self.jacobian_step)

    def jacobian_H(self, x, u=None) -> np.ndarray:
        uu = None if u is None else np.asarray(u)[..., None, :]
        return numeric_jacobian(lambda p: self.h(p, uu), x, self.jacobian_step)

    @property
    def wrap_mask(self) -> np.ndarray:
        m = np.zeros((self.n_z, 1), dtype=bool)
        m[list(self.angle_channels)] = True
        return m

    def propagate(self, x: Tensor, u=None, dt=None) -> tuple[Tensor, Tensor]:
        xv = x.data[..., 0]
        F = self.jacobian_F(xv, u, dt)
        return tn.linearized(x, self.f(xv, u, dt)[..., None], F), Tensor(F)

    def measure(self, x: Tensor, u=None) -> tuple[Tensor, Tensor]:
        xv = x.data[..., 0]
        H = self.jacobian_H(xv, u)
        return tn.linearized(x, self.h(xv, u)[..., None], H), Tensor(H)


class LinearModel(SystemModel):
    """``x' = A x``, ``z = H x`` with constant matrices."""

    def __init__(self, A, H, q_nominal, r_nominal, angle_channels=()):
        self.A = np.asarray(A, dtype=float)
        self.H = np.asarray(H, dtype=float)
        self.n_x = self.A.shape[0]
        self.n_z = self.H.shape[0]
        self.q_nominal = np.asarray(q_nominal, dtype=float)
        self.r_nominal = np.asarray(r_nominal, dtype=float)
        self.angle_channels = tuple(angle_channels)

    def f(self, x, u=None, dt=None):
        return x @ self.A.T

    def h(self, x, u=None):
        return x @ self.H.T

    def jacobian_F(self, x, u=None, dt=None):
        return np.broadcast_to(self.A, np.shape(x)[:-1] + self.A.shape).copy()

    def jacobian_H(self, x, u=None):
        return np.broadcast_to(self.H, np.shape(x)[:-1] + self.H.shape).copy()

    def propagate(self, x, u=None, dt=None):
        A = Tensor(self.A)
        return A @ x, A

    def measure(self, x, u=None):
        H = Tensor(self.H)
        return H @ x, H


def _quadratic_form(params: chaos.ChaosParams):
    """Write the ODE as ``A x + c + 0.5 M(x) x`` with ``M(x) = reshape(C x)``.

    ``M(x)`` is the Jacobian of the quadratic part, so the ODE Jacobian is
    ``A + M(x)``.
    """
    C = np.zeros((9, 3))
    if params.system == chaos.LORENZ:
        s, r, b = params.sigma, params.rho, params.beta
        A = np.array([[-s, s, 0.0], [r, -1.0, 0.0], [0.0, 0.0, -b]])
        c = np.zeros((3, 1))
        C[3, 2] = -1.0  # M[1,0] = -z
        C[5, 0] = -1.0  # M[1,2] = -x
        C[6, 1] = 1.0  # M[2,0] = y
        C[7, 0] = 1.0  # M[2,1] = x
    else:
        A = np.array([[0.0, -1.0, -1.0], [1.0, params.a, 0.0], [0.0, 0.0, -params.c]])
        c = np.array([[0.0], [0.0], [params.b]])
        C[6, 2] = 1.0  # M[2,0] = z
        C[8, 0] = 1.0  # M[2,2] = x
    return A, c, C


class ChaosModel(SystemModel):
    """Lorenz or Rossler RK4 step with linear or range-bearing observations.

    Both the step and its Jacobian are built from tape ops, so gradients
    flow through the Jacobians as well as the state.
    """

    def __init__(self, params: chaos.ChaosParams | None = None, q_base: float = 0.01, r_base=(1.0, 2.0)):
        self.params = params or chaos.ChaosParams()
        self.n_x, self.n_z = 3, 2
        self.dt = self.params.dt
        self.kind = self.params.observation
        self.angle_channels = (1,) if self.kind == chaos.RANGE_BEARING else ()
        self.q_nominal = np.full(3, float(q_base))
        self.r_nominal = np.asarray(r_base, dtype=float)
        self._A, self._c, self._C = _quadratic_form(self.params)
        self._H = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    def f(self, x, u=None, dt=None):
        return chaos.rk4_step(self.params, x, dt)

    def h(self, x, u=None):
        return chaos.observe(self.kind, x)

    def jacobian_F(self, x, u=None, dt=None):
        return chaos.rk4_step_jacobian(self.params, np.asarray(x, dtype=float), dt)[1]

    def jacobian_H(self, x, u=None):
        x = np.asarray(x, dtype=float)
        if self.kind == chaos.LINEAR:
            return np.broadcast_to(self._H, x.shape[:-1] + (2, 3)).copy()
        px, py = x[..., 0], x[..., 1]
        r2 = px * px + py * py
        r = np.sqrt(r2)
        H = np.zeros(x.shape[:-1] + (2, 3))
        H[..., 0, 0], H[..., 0, 1] = px / r, py / r
        H[..., 1, 0], H[..., 1, 1] = -py / r2, px / r2
        return H

    def _field(self, x: Tensor):
        M = tn.reshape(self._C @ x, x.shape[:-2] + (3, 3))
        k = self._A @ x + self._c + 0.5 * (M @ x)
        return k, self._A + M

    def propagate(self, x, u=None, dt=None):
        h = self.dt if dt is None else dt
        eye = np.eye(3)
        k1, J1 = self._field(x)
        k2, J = self._field(x + (0.5 * h) * k1)
        T2 = J @ (eye + (0.5 * h) * J1)
        k3, J = self._field(x + (0.5 * h) * k2)
        T3 = J @ (eye + (0.5 * h) * T2)
        k4, J = self._field(x + h * k3)
        T4 = J @ (eye + h * T3)
        nxt = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        F = eye + (h / 6.0) * (J1 + 2.0 * T2 + 2.0 * T3 + T4)
        return nxt, F

    def measure(self, x, u=None):
        if self.kind == chaos.LINEAR:
            H = Tensor(self._H)
            return H @ x, H
        px = x[..., 0:1, :]
        py = x[..., 1:2, :]
        r2 = px * px + py * py
        r = tn.sqrt(r2)
        z = tn.concat([r, tn.atan2(py, px)], axis=-2)
        zero = px * 0.0
        row0 = tn.concat([px / r, py / r, zero], axis=-1)
        row1 = tn.concat([-py / r2, px / r2, zero], axis=-1)
        return z, tn.concat([row0, row1], axis=-2)


# --- filter state -----------------------------------------------------------


@dataclass(frozen=True)
class Safeguards:
    floor: float = 1e-8
    band: float = 100.0
    symmetrize: bool = True

    def __post_init__(self):
        if not self.floor > 0:
            raise ValueError("floor must be positive")
        if not self.band >= 1:
            raise ValueError("band factor must be >= 1")

    def bounds(self, base) -> tuple[np.ndarray, np.ndarray]:
        base = np.asarray(base, dtype=float)
        return np.maximum(self.floor, base / self.band), base * self.band


@dataclass
class FilterState:
    x: Tensor  # (..., n_x, 1)
    P: Tensor  # (..., n_x, n_x)
    q: Tensor  # (..., n_x, 1)
    r: Tensor  # (..., n_z, 1)

    @classmethod
    def initial(cls, model: SystemModel, x0, P0) -> "FilterState":
        x0 = np.asarray(x0, dtype=float)
        lead = x0.shape[:-1]
        P0 = np.broadcast_to(np.asarray(P0, dtype=float), lead + (model.n_x, model.n_x))
        q = np.broadcast_to(model.q_nominal, lead + (model.n_x,))[..., None].copy()
        r = np.broadcast_to(model.r_nominal, lead + (model.n_z,))[..., None].copy()
        return cls(Tensor(x0[..., None].copy()), Tensor(np.array(P0)), Tensor(q), Tensor(r))

    def detach(self) -> "FilterState":
        return FilterState(self.x.detach(), self.P.detach(), self.q.detach(), self.r.detach())


@dataclass
class Innovation:
    nu: Tensor
    S: Tensor
    K: Tensor
    H: Tensor


def _sym(P: Tensor) -> Tensor:
    return 0.5 * (P + P.T)


def ekf_predict(model: SystemModel, fs: FilterState, u=None, dt=None, sg: Safeguards | None = None):
    """Time update; returns the predicted state and the transition Jacobian."""
    x, F = model.propagate(fs.x, u, dt)
    P = F @ fs.P @ F.T + tn.diag_embed(fs.q)
    if sg is None or sg.symmetrize:
        P = _sym(P)
    return replace(fs, x=x, P=P), F


def innovate(model: SystemModel, fs: FilterState, z, u=None) -> Innovation:
    """Innovation, its covariance and the Kalman gain for a predicted state."""
    zp, H = model.measure(fs.x, u)
    z = tn.as_tensor(np.asarray(z, dtype=float)[..., None] if not isinstance(z, Tensor) else z)
    nu = z - zp
    if model.angle_channels:
        nu = tn.where(model.wrap_mask, tn.wrap_angle(nu), nu)
    PHt = fs.P @ H.T
    S = H @ PHt + tn.diag_embed(fs.r)
    try:
        Sinv = tn.inv(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationCovariance("innovation covariance is singular") from exc
    return Innovation(nu, S, PHt @ Sinv, H)


def correct(fs: FilterState, inn: Innovation, joseph: bool = False, sg: Safeguards | None = None) -> FilterState:
    """Measurement update with a precomputed gain."""
    x = fs.x + inn.K @ inn.nu
    n = fs.P.shape[-1]
    IKH = np.eye(n) - inn.K @ inn.H
    if joseph:
        P = IKH @ fs.P @ IKH.T + inn.K @ tn.diag_embed(fs.r) @ inn.K.T
    else:
        P = IKH @ fs.P
    if sg is None or sg.symmetrize:
        P = _sym(P)
    return replace(fs, x=x, P=P)


def ekf_update(model: SystemModel, fs: FilterState, z, u=None, joseph: bool = False):
    inn = innovate(model, fs, z, u)
    return correct(fs, inn, joseph), inn.nu, inn.S, inn.K


def shkf_adaptation_factor(b: float, k: int) -> float:
    """``(1 - b) / (1 - b**(k + 1))``."""
    if not 0.0 < b < 1.0:
        raise ValueError("forgetting factor must lie in (0, 1)")
    if k < 0:
        raise ValueError("k must be non-negative")
    return (1.0 - b) / (1.0 - b ** (k + 1))


def shkf_empirical_moments(nu, H, P_prior, K, P_post, F, P_prev):
    """Diagonals of the instantaneous noise estimates (may be negative).

    ``r_hat = diag(nu nu^T - H P_prior H^T)`` and
    ``q_hat = diag(K nu nu^T K^T + P_post - F P_prev F^T)``.
    """
    nu, H, P_prior, K, P_post, F, P_prev = map(tn.as_tensor, (nu, H, P_prior, K, P_post, F, P_prev))
    r_hat = nu * nu - tn.sum_((H @ P_prior) * H, axis=-1, keepdims=True)
    Knu = K @ nu
    q_hat = Knu * Knu + tn.diag(P_post) - tn.sum_((F @ P_prev) * F, axis=-1, keepdims=True)
    return r_hat, q_hat


def blend_and_safeguard(prev, emp, d, base, sg: Safeguards) -> Tensor:
    """Element-wise ``(1 - d) * prev + d * emp`` clamped into the safeguard band."""
    prev, emp = tn.as_tensor(prev), tn.as_tensor(emp)
    lo, hi = sg.bounds(base)
    shape = prev.shape[-2:]
    mixed = prev + d * (emp - prev)
    return tn.clip(mixed, lo.reshape(shape), hi.reshape(shape))


@dataclass
class StepDiagnostics:
    nu: Tensor
    S: Tensor
    K: Tensor
    d: Tensor | float | None = None


def ekf_step(model, fs, z, u=None, dt=None, joseph=False, sg: Safeguards | None = None):
    """One predict/update cycle with static noise covariances."""
    pred, _ = ekf_predict(model, fs, u, dt, sg)
    inn = innovate(model, pred, z, u)
    return correct(pred, inn, joseph, sg), StepDiagnostics(inn.nu, inn.S, inn.K)


def adapt(model, fs_prev, pred, post, F, inn, dQ, dR, sg: Safeguards) -> FilterState:
    """Blend the empirical moments into ``q``/``r`` for use at the next step."""
    r_hat, q_hat = shkf_empirical_moments(inn.nu, inn.H, pred.P, inn.K, post.P, F, fs_prev.P)
    q = blend_and_safeguard(fs_prev.q, q_hat, dQ, model.q_nominal, sg)
    r = blend_and_safeguard(fs_prev.r, r_hat, dR, model.r_nominal, sg)
    return replace(post, q=q, r=r)


def shkf_step(model, fs, z, d, u=None, dt=None, sg: Safeguards = Safeguards(), joseph=False):
    """Classical fading-memory step with adaptation factor ``d`` (scalar or vector).

    A vector ``d`` of length ``n_x + n_z`` is split as ``[d_Q, d_R]``.
    """
    pred, F = ekf_predict(model, fs, u, dt, sg)
    inn = innovate(model, pred, z, u)
    post = correct(pred, inn, joseph, sg)
    dQ, dR = split_d(d, model.n_x)
    return adapt(model, fs, pred, post, F, inn, dQ, dR, sg), StepDiagnostics(inn.nu, inn.S, inn.K, d)


def split_d(d, n_x: int):
    if isinstance(d, Tensor) or np.ndim(d) > 0:
        d = tn.as_tensor(d)
        return d[..., :n_x, :], d[..., n_x:, :]
    return float(d), float(d)


def run_filter(
    model: SystemModel,
    fs: FilterState,
    Z,
    U=None,
    method: str = "ekf",
    b: float | None = None,
    sg: Safeguards = Safeguards(),
    joseph: bool = False,
):
    """Run the EKF (``method="ekf"``) or SHKF with forgetting factor ``b``.

    ``Z`` has shape ``(..., T, n_z)``; returns the posterior means
    ``(..., T, n_x)`` and the final :class:`FilterState`.
    """
    Z = np.asarray(Z, dtype=float)
    T = Z.shape[-2]
    out = np.empty(Z.shape[:-2] + (T, model.n_x))
    for k in range(T):
        u = None if U is None else U[..., k, :]
        if method == "ekf":
            fs, _ = ekf_step(model, fs, Z[..., k, :], u, None, joseph, sg)
        else:
            fs, _ = shkf_step(model, fs, Z[..., k, :], shkf_adaptation_factor(b, k), u, None, sg, joseph)
        out[..., k, :] = fs.x.data[..., 0]
    return out, fs
