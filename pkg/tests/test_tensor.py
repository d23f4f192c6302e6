import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndr_shkf import tensor as tn
from ndr_shkf.errors import NonFiniteGradient, NonFiniteValue, NotPositiveDefinite, ShapeMismatch
from ndr_shkf.tensor import Tape, Tensor, grad_check


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def _lower(rng, n):
    L = np.tril(rng.normal(size=(n, n)))
    L[np.diag_indices(n)] = np.abs(L[np.diag_indices(n)]) + 1.0
    return L


# (name, builder of point(s), scalar function of tensors)
OP_CASES = {
    "add": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(1, 2))], lambda a, b: tn.sqnorm(a + b)),
    "sub": (lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 1))], lambda a, b: tn.sqnorm(a - b)),
    "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: tn.sum_(a * b * a)),
    "div": (lambda r: [r.normal(size=(3, 1)), _away_from_zero(r, (3, 1), 0.5)], lambda a, b: tn.sum_(a / b)),
    "neg": (lambda r: r.normal(size=(2, 2)), lambda a: tn.sqnorm(-a + 1.0)),
    "atan2": (lambda r: [r.normal(size=(3, 1)), _away_from_zero(r, (3, 1), 0.5)], lambda y, x: tn.sum_(tn.atan2(y, x))),
    "exp": (lambda r: r.normal(size=(3, 1)), lambda a: tn.sum_(tn.exp(a))),
    "log": (lambda r: np.abs(r.normal(size=(3, 1))) + 0.5, lambda a: tn.sum_(tn.log(a))),
    "sqrt": (lambda r: np.abs(r.normal(size=(3, 1))) + 0.5, lambda a: tn.sum_(tn.sqrt(a))),
    "square": (lambda r: r.normal(size=(3, 1)), lambda a: tn.sum_(tn.square(a))),
    "sin": (lambda r: r.normal(size=(3, 1)), lambda a: tn.sum_(tn.sin(a))),
    "cos": (lambda r: r.normal(size=(3, 1)), lambda a: tn.sum_(tn.cos(a))),
    "arcsin": (lambda r: r.uniform(-0.8, 0.8, size=(3, 1)), lambda a: tn.sum_(tn.arcsin(a))),
    "sigmoid": (lambda r: r.normal(size=(4, 1)), lambda a: tn.sum_(tn.sigmoid(a) * a)),
    "tanh": (lambda r: r.normal(size=(4, 1)), lambda a: tn.sum_(tn.tanh(a) * a)),
    "relu": (lambda r: _away_from_zero(r, (4, 1)), lambda a: tn.sum_(tn.relu(a) * a)),
    "abs": (lambda r: _away_from_zero(r, (4, 1)), lambda a: tn.sum_(tn.abs_(a) * a)),
    "clip": (lambda r: r.uniform(-2, 2, size=(6, 1)) + 0.05, lambda a: tn.sum_(tn.clip(a * a, 0.1, 1.9) * a)),
    "transpose": (lambda r: r.normal(size=(2, 3)), lambda a: tn.sum_((a.T @ a) * (a.T @ a)) + tn.sqnorm(tn.transpose(a) * np.arange(6.0).reshape(3, 2))),
    "reshape": (lambda r: r.normal(size=(2, 3)), lambda a: tn.sum_(tn.reshape(a, (3, 2)) @ a)),
    "slice": (lambda r: r.normal(size=(4, 2)), lambda a: tn.sqnorm(a[1:3, :] * a[0:2, :])),
    "concat": (lambda r: [r.normal(size=(2, 1)), r.normal(size=(3, 1))], lambda a, b: tn.sqnorm(tn.concat([a, b]) * tn.concat([b, a]))),
    "sum": (lambda r: r.normal(size=(3, 2)), lambda a: tn.sqnorm(tn.sum_(a, axis=-1, keepdims=True))),
    "mean": (lambda r: r.normal(size=(3, 2)), lambda a: tn.sqnorm(tn.mean(a, axis=-2))),
    "sqnorm": (lambda r: r.normal(size=(5, 1)), lambda a: tn.sqnorm(a)),
    "matmul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(3, 2))], lambda a, b: tn.sqnorm(a @ b)),
    "outer": (lambda r: [r.normal(size=(3, 1)), r.normal(size=(2, 1))], lambda a, b: tn.sqnorm(tn.outer(a, b))),
    "diag": (lambda r: r.normal(size=(3, 3)), lambda a: tn.sqnorm(tn.diag(a @ a))),
    "diag_embed": (lambda r: r.normal(size=(3, 1)), lambda a: tn.sqnorm(tn.diag_embed(a) @ tn.diag_embed(a + 1.0))),
    "cholesky": (lambda r: r.normal(size=(3, 3)), lambda a: tn.sum_(tn.cholesky(a @ a.T + 3.0 * np.eye(3)) * np.tril(np.ones((3, 3))))),
    "triangular_solve": (lambda r: [_lower(r, 3), r.normal(size=(3, 1))], lambda L, b: tn.sqnorm(tn.triangular_solve(tn.concat([L[:, 0:1] * 0 + L[:, 0:1], L[:, 1:]], axis=-1) * np.tril(np.ones((3, 3))), b))),
    "inv": (lambda r: _spd(r, 3), lambda a: tn.sum_(tn.inv(a) * np.arange(9.0).reshape(3, 3))),
    "wrap_angle": (lambda r: r.uniform(-3, 3, size=(3, 1)), lambda a: tn.sqnorm(tn.wrap_angle(a * 0.9))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_differences(name):
    build, fn = OP_CASES[name]
    for seed in range(100):
        report = grad_check(fn, build(np.random.default_rng(seed)), step=1e-6, tol=1e-5, floor=1e-4)
        assert report.passed, (name, seed, report)


def test_linearized_uses_supplied_jacobian():
    A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    tape = Tape()
    x = tape.leaf(np.array([[0.3], [0.7]]))
    y = tn.linearized(x, A @ x.data, A)
    (g,) = tape.gradient(tn.sum_(y), [x])
    np.testing.assert_allclose(g, A.sum(axis=0)[:, None], rtol=0, atol=1e-15)


@pytest.mark.parametrize(
    "value, expected",
    [
        (np.diag([4.0, 9.0]), np.diag([2.0, 3.0])),
        (np.eye(3), np.eye(3)),
    ],
)
def test_cholesky_diagonal(value, expected):
    np.testing.assert_allclose(tn.cholesky(value).data, expected, atol=1e-15)


def test_triangular_solve_identity():
    out = tn.triangular_solve(np.eye(2), np.array([[1.0], [2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0], [2.0]])


def test_sigmoid_at_zero():
    assert tn.sigmoid(np.zeros((1, 1))).item() == 0.5


def test_square_derivative():
    tape = Tape()
    x = tape.leaf(np.array(3.0))
    (g,) = tape.gradient(x * x, [x])
    assert g == 6.0


def test_gradient_of_constant_is_zero():
    tape = Tape()
    x = tape.leaf(np.ones((2, 1)))
    y = tape.leaf(np.ones((1, 1)))
    loss = tn.sum_(y * 2.0)
    gx, gy = tape.gradient(loss, [x, y])
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gy, 2.0)


def test_trace_of_cholesky_gradient():
    # analytic: d tr(L) / dS_ii = 1 / (2 L_ii) on a diagonal S
    S = np.diag([4.0, 9.0])

    def fn(s):
        return tn.sum_(tn.diag(tn.cholesky(0.5 * (s + s.T))))

    report = grad_check(fn, S, step=1e-6, tol=1e-6)
    assert report.passed, report
    tape = Tape()
    s = tape.leaf(S)
    (g,) = tape.gradient(fn(s), [s])
    np.testing.assert_allclose(g, np.diag([0.25, 1.0 / 6.0]), atol=1e-12)


def test_grad_check_sqnorm_random_vector():
    x = np.random.default_rng(4).normal(size=(5, 1))
    assert grad_check(tn.sqnorm, x, tol=1e-6).passed


def test_grad_check_independent_function():
    report = grad_check(lambda x: tn.sum_(x * 0.0) + 1.0, np.ones((3, 1)), tol=1e-6)
    assert report.passed
    assert report.max_rel_error == 0.0


@given(st.integers(0, 10_000), st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_cholesky_recovers_lower_factor(seed, n):
    L = _lower(np.random.default_rng(seed), n)
    np.testing.assert_allclose(tn.cholesky(L @ L.T).data, L, atol=1e-10)


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    tape = Tape()
    a = tape.leaf(rng.normal(size=(4, 4)))
    b = tape.leaf(rng.normal(size=(4, 1)))
    loss = tn.sqnorm(tn.tanh(a @ b) * b) + tn.sum_(tn.cholesky(a @ a.T + 4 * np.eye(4)))
    first = tape.gradient(loss, [a, b])
    second = tape.gradient(loss, [a, b])
    for g1, g2 in zip(first, second):
        assert np.array_equal(g1, g2)


def test_backward_visits_in_reverse_insertion_order():
    tape = Tape()
    x = tape.leaf(np.array([[2.0]]))
    seen = []
    y = x * x
    z = y + x
    for i, (kind, parents, vjp) in enumerate(tape.nodes):
        if vjp is not None:
            tape.nodes[i] = (kind, parents, (lambda f, i: lambda g: (seen.append(i), f(g))[1])(vjp, i))
    tape.gradient(z, [x])
    assert seen == sorted(seen, reverse=True)
    assert len(seen) == len(set(seen))


@pytest.mark.parametrize(
    "v, expected",
    [(0.5, 1.0), (-0.5, 1.0), (-1.0, 1.0), (1.0, 1.0), (1.5, 0.0), (-1.5, 0.0)],
)
def test_clip_subgradient(v, expected):
    tape = Tape()
    x = tape.leaf(np.array([[v]]))
    (g,) = tape.gradient(tn.sum_(tn.clip(x, -1.0, 1.0)), [x])
    assert g[0, 0] == expected


def test_abs_subgradient_at_zero_propagates():
    tape = Tape()
    x = tape.leaf(np.zeros((1, 1)))
    (g,) = tape.gradient(tn.sum_(tn.abs_(x)), [x])
    assert g[0, 0] == 1.0


def test_cholesky_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        tn.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_value_raises():
    with pytest.raises(NonFiniteValue):
        tn.log(np.zeros((1, 1)) - 1.0)


def test_lenient_lets_nan_through():
    with tn.lenient():
        out = tn.log(np.zeros((1, 1)) - 1.0)
    assert np.isnan(out.data).all()


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.leaf(np.ones((2, 1)))
    with pytest.raises(ShapeMismatch):
        tape.backward(x * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_raises():
    tape = Tape()
    x = tape.leaf(np.array([[1e-200]]))
    with tn.lenient():
        y = tn.sum_(tn.sqrt(x * 1e-200))
    with pytest.raises(NonFiniteGradient):
        tape.gradient(y, [x])


def test_untracked_ops_do_not_record():
    tape = Tape()
    tn.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert len(tape) == 0


def test_batched_cholesky_broadcasts():
    rng = np.random.default_rng(1)
    S = np.stack([_spd(rng, 3) for _ in range(4)])
    L = tn.cholesky(S).data
    np.testing.assert_allclose(L @ np.swapaxes(L, -1, -2), S, atol=1e-12)
