"""Dense float64 tensors with a reverse-mode tape.

Arrays follow numpy broadcasting; the trailing two axes are the matrix axes and
any leading axes are batch axes. Vectors are stored as ``(..., n, 1)`` columns
so that the same code runs on one trajectory or on a batch of them.

A :class:`Tensor` carries a numpy array and, when it is tracked, a reference to
the :class:`Tape` that recorded it plus its node index. Untracked tensors are
plain immutable values. Every forward op checks its output for NaN/Inf and
raises :class:`NonFiniteValue` unless the :func:`lenient` context is active.

Example::

    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    y = (x * x).sum()
    (gx,) = tape.gradient(y, [x])     # -> [[6.0]]
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteGradient, NonFiniteValue, NotPositiveDefinite, ShapeMismatch

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "as_tensor",
    "grad_check",
    "lenient",
]

_STRICT = [True]


@contextlib.contextmanager
def lenient():
    """Allow non-finite values and failed factorizations to propagate as NaN.

    Used by the batched evaluation path, which flags diverged batch elements
    itself after each step.
    """
    prev = _STRICT[0]
    _STRICT[0] = False
    try:
        with np.errstate(all="ignore"):
            yield
    finally:
        _STRICT[0] = prev


def _check(value: np.ndarray, kind: str) -> np.ndarray:
    if _STRICT[0] and not math.isfinite(float(np.sum(value))):
        if not np.isfinite(value).all():
            raise NonFiniteValue(f"{kind} produced a non-finite value")
    return value


class Tape:
    """Append-only record of ops; node index order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        _check(arr, "leaf")
        self.nodes.append(("leaf", (), None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _record(self, kind: str, parents: tuple[int, ...], vjp: Callable) -> int:
        self.nodes.append((kind, parents, vjp))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Return ``{leaf node id: gradient}`` for every leaf reached from ``loss``."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        leaves: dict[int, np.ndarray] = {}
        nodes = self.nodes
        for i in range(loss.node, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            _, parents, vjp = nodes[i]
            if vjp is None:
                leaves[i] = g
                continue
            for p, pg in zip(parents, vjp(g)):
                if p < 0 or pg is None:
                    continue
                prev = pending.get(p)
                pending[p] = pg if prev is None else prev + pg
        return leaves

    def gradient(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``wrt``; unused leaves get zeros."""
        leaves = self.backward(loss)
        out = []
        for t in wrt:
            if t.tape is not self:
                raise ValueError("gradient requested for a tensor from another tape")
            g = leaves.get(t.node)
            g = np.zeros_like(t.data) if g is None else g.reshape(t.data.shape)
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for node {t.node}")
            out.append(g)
        return out


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, node: int = -1) -> None:
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor({self.data!r}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(value: np.ndarray, kind: str, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check(value, kind)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node if t.tape is tape else -1 for t in inputs)
    return Tensor(value, tape, tape._record(kind, parents, vjp))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.tape is not None else None
        gb = _unbroadcast(g * av, bv.shape) if b.tape is not None else None
        return ga, gb

    return _make(av * bv, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape) if a.tape is not None else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.tape is not None else None
        return ga, gb

    return _make(out, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (``cond`` is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(c, a.data, b.data),
        "where",
        (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb)),
    )


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    yv, xv = y.data, x.data
    r2 = xv * xv + yv * yv

    def vjp(g):
        return _unbroadcast(g * xv / r2, yv.shape), _unbroadcast(-g * yv / r2, xv.shape)

    return _make(np.arctan2(yv, xv), "atan2", (y, x), vjp)


# --- elementwise unary ------------------------------------------------------


def _unary(kind: str, value: np.ndarray, a: Tensor, dfdx) -> Tensor:
    return _make(value, kind, (a,), lambda g: (g * dfdx(),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary("exp", out, a, lambda: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("log", np.log(v), a, lambda: 1.0 / v)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary("sqrt", out, a, lambda: 0.5 / out)


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("square", v * v, a, lambda: 2.0 * v)


def sin(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("sin", np.sin(v), a, lambda: np.cos(v))


def cos(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("cos", np.cos(v), a, lambda: -np.sin(v))


def arcsin(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("arcsin", np.arcsin(v), a, lambda: 1.0 / np.sqrt(1.0 - v * v))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _unary("sigmoid", out, a, lambda: out * (1.0 - out))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary("tanh", out, a, lambda: 1.0 - out * out)


def relu(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _unary("relu", np.maximum(v, 0.0), a, lambda: (v > 0.0).astype(np.float64))


def abs_(a) -> Tensor:
    # subgradient +1 at zero
    a = as_tensor(a)
    v = a.data
    return _unary("abs", np.abs(v), a, lambda: np.where(v >= 0.0, 1.0, -1.0))


def clip(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]`` (constant bounds); gradient 1 on the closed interval."""
    a = as_tensor(a)
    v = a.data
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.minimum(np.maximum(v, lo), hi)

    def vjp(g):
        inside = (v >= lo) & (v <= hi)
        return (_unbroadcast(np.where(inside, g, 0.0), v.shape),)

    return _make(out, "clip", (a,), vjp)


def wrap_angle(a) -> Tensor:
    """Map angles into (-pi, pi]; locally a constant shift, so gradient 1."""
    a = as_tensor(a)
    v = a.data
    out = v - 2.0 * np.pi * np.ceil((v - np.pi) / (2.0 * np.pi))
    return _make(out, "wrap_angle", (a,), lambda g: (g,))


# --- structural -------------------------------------------------------------


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(_swap(a.data), "transpose", (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(s),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    s = a.shape

    def vjp(g):
        z = np.zeros(s)
        z[idx] += g
        return (z,)

    return _make(a.data[idx], "slice", (a,), vjp)


def concat(tensors: Iterable, axis: int = -2) -> Tensor:
    """Concatenate along a (negative) axis, broadcasting the other axes."""
    ts = [as_tensor(t) for t in tensors]
    if axis >= 0:
        raise ValueError("concat axis must be negative")
    shapes = [t.shape for t in ts]
    nd = max(len(s) for s in shapes)
    try:
        masked = [tuple(1 if i == nd + axis else d for i, d in enumerate((1,) * (nd - len(s)) + s)) for s in shapes]
        common = np.broadcast_shapes(*masked)
        arrs = []
        for t in ts:
            target = list(common)
            target[nd + axis] = t.shape[axis]
            arrs.append(np.broadcast_to(t.data, tuple(target)))
        out = np.concatenate(arrs, axis=axis)
    except (ValueError, IndexError) as exc:
        raise ShapeMismatch(f"concat of {shapes}") from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        parts = np.split(g, cuts, axis=axis)
        return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))

    return _make(out, "concat", ts, vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s).copy(),)

    return _make(np.asarray(out, dtype=np.float64), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def sqnorm(a) -> Tensor:
    """Sum of squares over all entries."""
    a = as_tensor(a)
    v = a.data
    return _make(np.asarray(np.sum(v * v)), "sqnorm", (a,), lambda g: (2.0 * g * v,))


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    try:
        out = av @ bv
    except ValueError as exc:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g @ _swap(bv), av.shape) if a.tape is not None else None
        gb = _unbroadcast(_swap(av) @ g, bv.shape) if b.tape is not None else None
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def outer(a, b) -> Tensor:
    return matmul(a, transpose(b))


def diag(a) -> Tensor:
    """Diagonal of ``(..., n, n)`` as a ``(..., n, 1)`` column."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"diag needs square matrices, got {a.shape}")
    out = np.diagonal(a.data, axis1=-2, axis2=-1)[..., None].copy()
    return _make(out, "diag", (a,), lambda g: (_embed(g),))


def _embed(v: np.ndarray) -> np.ndarray:
    n = v.shape[-2]
    out = np.zeros(v.shape[:-1] + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = v[..., 0]
    return out


def diag_embed(a) -> Tensor:
    """``(..., n, 1)`` column to a ``(..., n, n)`` diagonal matrix."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != 1:
        raise ShapeMismatch(f"diag_embed needs (..., n, 1), got {a.shape}")
    return _make(
        _embed(a.data),
        "diag_embed",
        (a,),
        lambda g: (np.diagonal(g, axis1=-2, axis2=-1)[..., None].copy(),),
    )


def _batched(fn, a: np.ndarray) -> np.ndarray:
    """Apply a factorization, turning per-element failures into NaN in lenient mode."""
    try:
        return fn(a)
    except np.linalg.LinAlgError:
        if _STRICT[0]:
            raise
    flat = a.reshape((-1,) + a.shape[-2:])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        try:
            out[i] = fn(m)
        except np.linalg.LinAlgError:
            out[i] = np.nan
    return out.reshape(a.shape)


def cholesky(a) -> Tensor:
    """Lower Cholesky factor; gradient symmetric in the input."""
    a = as_tensor(a)
    v = a.data
    if v.ndim < 2 or v.shape[-1] != v.shape[-2]:
        raise ShapeMismatch(f"cholesky needs square matrices, got {v.shape}")
    try:
        L = _batched(np.linalg.cholesky, v)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("cholesky pivot <= 0") from exc

    def vjp(g):
        Linv = np.linalg.inv(L)
        phi = np.tril(_swap(L) @ g)
        idx = np.arange(L.shape[-1])
        phi[..., idx, idx] *= 0.5
        x = _swap(Linv) @ phi @ Linv
        return (0.5 * (x + _swap(x)),)

    return _make(L, "cholesky", (a,), vjp)


def triangular_solve(L, b) -> Tensor:
    """Solve ``L x = b`` for lower-triangular ``L``."""
    L, b = as_tensor(L), as_tensor(b)
    Lv, bv = L.data, b.data
    try:
        x = np.linalg.solve(Lv, bv)
    except np.linalg.LinAlgError as exc:
        if _STRICT[0]:
            raise NotPositiveDefinite("singular triangular system") from exc
        x = np.full(np.broadcast_shapes(Lv.shape[:-1], bv.shape[:-1]) + bv.shape[-1:], np.nan)
    except ValueError as exc:
        raise ShapeMismatch(f"triangular_solve {Lv.shape} / {bv.shape}") from exc

    def vjp(g):
        gb = np.linalg.solve(_swap(Lv), g)
        gL = -np.tril(gb @ _swap(x)) if L.tape is not None else None
        return (None if gL is None else _unbroadcast(gL, Lv.shape)), _unbroadcast(gb, bv.shape)

    return _make(x, "triangular_solve", (L, b), vjp)


def inv(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    try:
        out = _batched(np.linalg.inv, v)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular matrix") from exc

    def vjp(g):
        t = _swap(out)
        return (-(t @ g @ t),)

    return _make(out, "inv", (a,), vjp)


def linearized(x, value, jac) -> Tensor:
    """Lift an external function onto the tape.

    ``value`` is ``f(x)`` computed outside the tape and ``jac`` its Jacobian
    ``(..., m, n)`` at ``x``; the backward pass uses ``jac^T g``.
    """
    x = as_tensor(x)
    J = np.asarray(jac, dtype=np.float64)
    sx = x.shape
    return _make(np.asarray(value, dtype=np.float64), "linearized", (x,), lambda g: (_unbroadcast(_swap(J) @ g, sx),))


def eye(n: int) -> np.ndarray:
    return np.eye(n)


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_entries: int
    worst_index: tuple[int, int] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    fn: Callable[..., Tensor],
    point,
    step: float = 1e-6,
    tol: float = 1e-6,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``fn`` against central differences.

    ``point`` is an array or a list of arrays, passed to ``fn`` as tensors.
    The relative error of entry ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, s)``
    where ``s = floor * max(1, max|n|)`` keeps round-off in near-zero entries
    from dominating.
    """
    single = not isinstance(point, (list, tuple))
    points = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]

    tape = Tape()
    leaves = [tape.leaf(p) for p in points]
    out = fn(*leaves)
    analytic = tape.gradient(out, leaves)

    def value(arrs):
        with np.errstate(all="raise"):
            return float(as_tensor(fn(*[Tensor(a) for a in arrs])).data.reshape(-1)[0])

    numeric = []
    for k, p in enumerate(points):
        g = np.zeros_like(p)
        flat = g.reshape(-1)
        for i in range(p.size):
            plus = [q.copy() for q in points]
            minus = [q.copy() for q in points]
            plus[k].reshape(-1)[i] += step
            minus[k].reshape(-1)[i] -= step
            flat[i] = (value(plus) - value(minus)) / (2.0 * step)
        numeric.append(g)

    scale = max([1.0] + [float(np.max(np.abs(n))) for n in numeric if n.size])
    worst, worst_idx, count = 0.0, None, 0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
        rel = np.abs(a - n) / denom
        count += rel.size
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            worst_idx = (k, int(np.argmax(rel)))
    return GradCheckReport(worst, tol, count, worst_idx)
