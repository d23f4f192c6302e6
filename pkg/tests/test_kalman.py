from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndr_shkf import chaos
from ndr_shkf import kalman as kf
from ndr_shkf.kalman import FilterState, LinearModel, Safeguards
from ndr_shkf.tensor import Tensor


def _fs(model, x, P, q=None, r=None):
    fs = FilterState.initial(model, np.asarray(x, float), np.asarray(P, float))
    if q is not None:
        fs.q = Tensor(np.asarray(q, float).reshape(-1, 1))
    if r is not None:
        fs.r = Tensor(np.asarray(r, float).reshape(-1, 1))
    return fs


def _identity(n_x=2, n_z=1, q=1.0, r=1.0):
    return LinearModel(np.eye(n_x), np.eye(n_z, n_x), np.full(n_x, q), np.full(n_z, r))


def test_predict_identity_zero_noise_keeps_P():
    m = _identity()
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    pred, _ = kf.ekf_predict(m, _fs(m, [1.0, 2.0], P, q=[0.0, 0.0]))
    np.testing.assert_array_equal(pred.P.data, P)


def test_predict_identity_unit_noise_adds_identity():
    m = _identity()
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    pred, _ = kf.ekf_predict(m, _fs(m, [1.0, 2.0], P, q=[1.0, 1.0]))
    np.testing.assert_allclose(pred.P.data, P + np.eye(2), atol=0)


def test_predict_lorenz_matches_dense_product():
    m = kf.ChaosModel()
    rng = np.random.default_rng(0)
    x = rng.uniform(-10, 10, 3) + [0, 0, 25]
    A = rng.normal(size=(3, 3))
    P = A @ A.T + np.eye(3)
    pred, F = kf.ekf_predict(m, _fs(m, x, P))
    _, Fref = chaos.rk4_step_jacobian(m.params, x)
    ref = Fref @ P @ Fref.T + np.diag(m.q_nominal)
    np.testing.assert_allclose(pred.P.data, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pred.x.data[:, 0], chaos.rk4_step(m.params, x), atol=1e-12)


def test_update_zero_innovation_keeps_state():
    m = _identity(2, 2)
    fs = _fs(m, [1.0, -2.0], np.eye(2))
    post, nu, _, _ = kf.ekf_update(m, fs, np.array([1.0, -2.0]))
    np.testing.assert_array_equal(nu.data, 0.0)
    np.testing.assert_array_equal(post.x.data, fs.x.data)


def test_scalar_update_closed_form():
    m = _identity(1, 1)
    fs = _fs(m, [0.0], [[1.0]], r=[1.0])
    post, nu, S, K = kf.ekf_update(m, fs, np.array([2.0]))
    assert K.item() == 0.5 and post.x.item() == 1.0 and post.P.item() == 0.5
    assert nu.item() == 2.0 and S.item() == 2.0


def test_bearing_innovation_wraps():
    m = LinearModel(np.eye(1), np.eye(1), [1.0], [1.0], angle_channels=(0,))
    fs = _fs(m, [np.pi - 0.1], [[1.0]])
    inn = kf.innovate(m, fs, np.array([-np.pi + 0.1]))
    assert abs(inn.nu.item() - 0.2) < 1e-12


@pytest.mark.parametrize(
    "b, k, expected",
    [(0.95, 0, 1.0), (0.95, 10_000, 0.05), (0.99, 1, float(Fraction(1, 100) / (1 - Fraction(99, 100) ** 2)))],
)
def test_adaptation_factor(b, k, expected):
    assert kf.shkf_adaptation_factor(b, k) == pytest.approx(expected, rel=1e-12)


def test_adaptation_factor_b099_k1_value():
    assert abs(kf.shkf_adaptation_factor(0.99, 1) - 0.5025125628140703) < 1e-15


@given(st.floats(0.01, 0.999), st.integers(0, 5000))
def test_adaptation_factor_range(b, k):
    d = kf.shkf_adaptation_factor(b, k)
    assert 0.0 < d <= 1.0


def test_empirical_moments_scalar():
    one = np.ones((1, 1))
    r_hat, _ = kf.shkf_empirical_moments(2 * one, one, one, one, one, one, one)
    assert r_hat.item() == 3.0
    r_hat, _ = kf.shkf_empirical_moments(0 * one, one, 0 * one, one, one, one, one)
    assert r_hat.item() == 0.0


def test_empirical_moments_dense_oracle():
    rng = np.random.default_rng(2)
    nu = rng.normal(size=(2, 1))
    H = rng.normal(size=(2, 3))
    F = rng.normal(size=(3, 3))
    K = rng.normal(size=(3, 2))

    def spd():
        A = rng.normal(size=(3, 3))
        return A @ A.T

    Pp, Pq, Pprev = spd(), spd(), spd()
    r_hat, q_hat = kf.shkf_empirical_moments(nu, H, Pp, K, Pq, F, Pprev)
    R_dense = nu @ nu.T - H @ Pp @ H.T
    Q_dense = K @ nu @ nu.T @ K.T + Pq - F @ Pprev @ F.T
    np.testing.assert_allclose(r_hat.data[:, 0], np.diag(R_dense), rtol=0, atol=1e-12)
    np.testing.assert_allclose(q_hat.data[:, 0], np.diag(Q_dense), rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "d, emp, expected",
    [(0.0, 7.0, 2.0), (1.0, 7.0, 7.0), (1.0, -5.0, 0.01), (0.5, 1e6, 100.0)],
)
def test_blend_and_safeguard(d, emp, expected):
    out = kf.blend_and_safeguard(np.array([[2.0]]), np.array([[emp]]), d, np.array([1.0]), Safeguards())
    assert out.item() == pytest.approx(expected)


def test_blend_floor_dominates_small_base():
    out = kf.blend_and_safeguard(np.array([[1e-12]]), np.array([[-1.0]]), 1.0, np.array([1e-9]), Safeguards())
    assert out.item() == 1e-8


def test_safeguards_validation():
    with pytest.raises(ValueError):
        Safeguards(floor=0.0)
    with pytest.raises(ValueError):
        Safeguards(band=0.5)


def test_numeric_jacobian_linear_map():
    A = np.random.default_rng(0).normal(size=(4, 3))
    J = kf.numeric_jacobian(lambda x: x @ A.T, np.ones(3))
    np.testing.assert_allclose(J, A, atol=1e-10)


def test_numeric_jacobian_lorenz_deriv():
    J = kf.numeric_jacobian(lambda x: chaos.deriv(chaos.ChaosParams(), x), np.ones(3))
    np.testing.assert_allclose(J, [[-10, 10, 0], [27, -1, -1], [1, 1, -8 / 3]], atol=1e-8)


def test_range_bearing_jacobian():
    m = kf.ChaosModel(chaos.ChaosParams(system=chaos.ROSSLER))
    x = np.array([3.0, 4.0, 1.0])
    H = m.jacobian_H(x)
    np.testing.assert_allclose(H, [[3 / 5, 4 / 5, 0], [-4 / 25, 3 / 25, 0]], atol=1e-15)
    np.testing.assert_allclose(H, kf.numeric_jacobian(lambda p: chaos.observe(chaos.RANGE_BEARING, p), x), atol=1e-8)
    _, Ht = m.measure(Tensor(x[:, None]))
    np.testing.assert_allclose(Ht.data, H, atol=1e-15)


@pytest.mark.parametrize("system", [chaos.LORENZ, chaos.ROSSLER])
def test_model_jacobians_match_differences(system):
    m = kf.ChaosModel(chaos.ChaosParams(system=system))
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(-8, 8, 3) + [0, 0, 10]
        np.testing.assert_allclose(m.jacobian_F(x), kf.numeric_jacobian(m.f, x), rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(m.jacobian_H(x), kf.numeric_jacobian(m.h, x), rtol=1e-4, atol=1e-7)
        nxt, F = m.propagate(Tensor(x[:, None]))
        np.testing.assert_allclose(F.data, m.jacobian_F(x), atol=1e-12)
        np.testing.assert_allclose(nxt.data[:, 0], m.f(x), atol=1e-12)


def _closed_form_kf(A, H, Q, R, x, P, Z):
    out = []
    for z in Z:
        x = A @ x
        P = A @ P @ A.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (z - H @ x)
        P = (np.eye(len(x)) - K @ H) @ P
        P = 0.5 * (P + P.T)
        out.append(x)
    return np.array(out)


def linear_gaussian_case(seed, T=1000):
    rng = np.random.default_rng(seed)
    A = np.array([[1.0, 0.1, 0.0], [0.0, 1.0, 0.1], [0.0, -0.05, 0.98]])
    H = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    q = np.array([0.01, 0.02, 0.03])
    r = np.array([0.5, 0.8])
    x = rng.normal(size=3)
    X, Z = [], []
    for _ in range(T):
        x = A @ x + np.sqrt(q) * rng.normal(size=3)
        X.append(x)
        Z.append(H @ x + np.sqrt(r) * rng.normal(size=2))
    return LinearModel(A, H, q, r), np.array(X), np.array(Z)


def test_ekf_equals_closed_form_kalman_filter():
    m, _, Z = linear_gaussian_case(0)
    est, _ = kf.run_filter(m, _fs(m, np.zeros(3), np.eye(3)), Z)
    ref = _closed_form_kf(m.A, m.H, np.diag(m.q_nominal), np.diag(m.r_nominal), np.zeros(3), np.eye(3), Z)
    np.testing.assert_allclose(est, ref, rtol=0, atol=1e-12)


def test_shkf_with_zero_d_is_ekf_bit_exact():
    m = kf.ChaosModel()
    ep = chaos.make_episodes(m.params, [0], 200, seed=3)
    fs_e = fs_s = FilterState.initial(m, ep.x_hat0[0], ep.P0)
    for k in range(200):
        fs_e, _ = kf.ekf_step(m, fs_e, ep.measurements[0, k], sg=Safeguards())
        fs_s, _ = kf.shkf_step(m, fs_s, ep.measurements[0, k], 0.0)
        assert np.array_equal(fs_e.x.data, fs_s.x.data)
        assert np.array_equal(fs_e.P.data, fs_s.P.data)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_fuzzed_shkf_keeps_invariants(seed):
    rng = np.random.default_rng(seed)
    m = kf.ChaosModel(chaos.ChaosParams(system=rng.choice([chaos.LORENZ, chaos.ROSSLER])))
    sg = Safeguards()
    x = rng.uniform(-10, 10, 3) + [0, 0, 20]
    fs = FilterState.initial(m, x, np.eye(3) * rng.uniform(0.1, 10))
    lo_q, hi_q = sg.bounds(m.q_nominal)
    lo_r, hi_r = sg.bounds(m.r_nominal)
    for k in range(30):
        z = m.h(x) + rng.normal(size=2) * rng.choice([1.0, 10.0 * np.sqrt(m.r_nominal.max())])
        fs, _ = kf.shkf_step(m, fs, z, rng.uniform(0, 1, 5)[:, None], sg=sg)
        P = fs.P.data
        assert np.abs(P - P.T).max() <= 1e-10
        assert np.all(np.diag(P) >= 0)
        assert np.all(fs.q.data[:, 0] >= lo_q) and np.all(fs.q.data[:, 0] <= hi_q)
        assert np.all(fs.r.data[:, 0] >= lo_r) and np.all(fs.r.data[:, 0] <= hi_r)
        x = fs.x.data[:, 0]


def test_batched_filtering_matches_single():
    m = kf.ChaosModel()
    ep = chaos.make_episodes(m.params, range(4), 50, seed=1)
    fs = FilterState.initial(m, ep.x_hat0, ep.P0)
    batch, _ = kf.run_filter(m, fs, ep.measurements, method="shkf", b=0.95)
    for i in range(4):
        single, _ = kf.run_filter(m, FilterState.initial(m, ep.x_hat0[i], ep.P0), ep.measurements[i], method="shkf", b=0.95)
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-10)


def test_joseph_form_agrees_with_simple_form_on_linear_system():
    m, _, Z = linear_gaussian_case(1, 200)
    a, _ = kf.run_filter(m, _fs(m, np.zeros(3), np.eye(3)), Z)
    b, _ = kf.run_filter(m, _fs(m, np.zeros(3), np.eye(3)), Z, joseph=True)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_whitened_innovations_have_identity_covariance():
    m, _, Z = linear_gaussian_case(2, 10_000)
    fs = _fs(m, np.zeros(3), np.eye(3))
    white = []
    for k, z in enumerate(Z):
        fs, d = kf.ekf_step(m, fs, z)
        if k >= 50:
            L = np.linalg.cholesky(d.S.data)
            white.append(np.linalg.solve(L, d.nu.data)[:, 0])
    C = np.cov(np.array(white).T)
    assert np.linalg.norm(C - np.eye(2)) <= 0.05
