"""Small reverse-mode differentiation engine on top of numpy.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
executed while a :class:`Tape` is active are recorded in execution order,
together with a closure computing the vector-Jacobian product of the op.
``Tape.backward`` replays the record in reverse.

Outside of a tape the same functions simply evaluate values, which is how
sampling and evaluation run.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "grad",
    "finite_diff_check",
]

EIGEN_GAP_FLOOR = 1e-9

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array with an optional handle into the active tape."""

    __slots__ = ("value", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def node(self) -> int | None:
        tape = _active_tape()
        if tape is not None and self._tape is tape:
            return self._node
        return None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, value={self.value!r})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops.

    Use as a context manager; ops evaluated inside are recorded. Entries are
    appended in execution order, so the record is topologically sorted.
    """

    def __init__(self):
        self.entries: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._leaves: dict[int, tuple[Tensor, int]] = {}
        self._n_nodes = 0
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def _new_node(self) -> int:
        n = self._n_nodes
        self._n_nodes += 1
        return n

    def watch(self, t: Tensor) -> int:
        """Register a leaf tensor and return its node id."""
        if t._tape is self:
            return t._node
        key = id(t)
        if key in self._leaves:
            return self._leaves[key][1]
        node = self._new_node()
        self._leaves[key] = (t, node)
        t._tape = self
        t._node = node
        return node

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            return self.watch(t)
        return None

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient map from node id to gradient array, for every node reached."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss is not attached to this tape")
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.value)}
        for out, inputs, vjp in reversed(self.entries):
            g = grads.pop(out, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for node, gi in zip(inputs, in_grads):
                if node is None or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        leaf_nodes = {node for _, node in self._leaves.values()}
        return {n: g for n, g in grads.items() if n in leaf_nodes}

    def gradient(self, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` with respect to ``tensors`` (zeros if unreached)."""
        gmap = self.backward(loss)
        out = []
        for t in tensors:
            node = t._node if t._tape is self else None
            g = gmap.get(node) if node is not None else None
            out.append(np.zeros_like(t.value) if g is None else g.reshape(t.shape))
        return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is detached from any tape")
    return tape.backward(loss)


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``f`` on fresh leaves built from ``args`` and return (value, grads)."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    with Tape() as tape:
        out = f(*leaves)
        grads = tape.gradient(out, leaves)
    return float(out.value), grads


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    return value


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    value = _check(np.asarray(value, dtype=np.float64), op)
    out = Tensor(value)
    tape = _active_tape()
    if tape is None:
        return out
    nodes = tuple(tape.node_of(t) for t in inputs)
    if all(n is None for n in nodes):
        return out
    out._tape = tape
    out._node = tape._new_node()
    tape.entries.append((out._node, nodes, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ZeroDivisionError("division by zero in autodiff div")
    out = av / bv
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    yv, xv = y.value, x.value
    r2 = xv * xv + yv * yv
    if np.any(r2 == 0):
        raise ZeroDivisionError("atan2 undefined at the origin")
    return _record("atan2", np.arctan2(yv, xv), (y, x),
                   lambda g: (_unbroadcast(g * xv / r2, yv.shape), _unbroadcast(-g * yv / r2, xv.shape)))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is not differentiated."""
    cond = np.asarray(cond.value if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("where", np.where(cond, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if p == 2:
        return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))
    return _record("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    return power(a, 2)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise ValueError("log of non-positive input")
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av < 0):
        raise ValueError("sqrt of negative input")
    out = np.sqrt(av)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def erf(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("erf", special.erf(av), (a,),
                   lambda g: (g * (2.0 / np.sqrt(np.pi)) * np.exp(-av * av),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.value)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("softplus", np.logaddexp(0.0, av), (a,), lambda g: (g * special.expit(av),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    s = special.expit(av)
    return _record("silu", av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


def wrap_angle(a) -> Tensor:
    """Map to [-pi, pi); derivative is one almost everywhere."""
    a = as_tensor(a)
    out = np.mod(a.value + np.pi, 2.0 * np.pi) - np.pi
    return _record("wrap", out, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record("cumsum", np.cumsum(a.value, axis=axis), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    return _record("broadcast", np.broadcast_to(a.value, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, sa),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(sa),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    """Transpose the last two axes."""
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record("slice", a.value[index], (a,), vjp)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (differentiable in ``a``)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    unique = indices.ndim == 1 and len(np.unique(indices)) == len(indices)

    def vjp(g):
        out = np.zeros(shape)
        idx = (slice(None),) * ax + (indices,)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record("take", np.take(a.value, indices, axis=ax), (a,), vjp)


def take_along_axis(a, indices, axis: int) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        if indices.shape[ax] == 1:
            # one index per row cannot collide
            np.put_along_axis(out, indices, g, axis=ax)
            return (out,)
        grid = np.indices(indices.shape, sparse=True)
        full = list(np.broadcast_arrays(*grid))
        full[ax] = indices
        np.add.at(out, tuple(full), g)
        return (out,)

    return _record("take_along_axis", np.take_along_axis(a.value, indices, axis=ax), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", np.concatenate([t.value for t in ts], axis=ax), ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _record("stack", np.stack([t.value for t in ts], axis=ax), ts, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    if bv.ndim == 2 and av.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        flat = av.reshape(-1, av.shape[-1])

        def vjp_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ bv.T).reshape(av.shape), flat.T @ g2)

        return _record("matmul", (flat @ bv).reshape(av.shape[:-1] + (bv.shape[-1],)), (a, b), vjp_flat)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _record("matmul", av @ bv, (a, b), vjp)


def cross(a, b) -> Tensor:
    """Cross product over the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(np.cross(bv, g), av.shape), _unbroadcast(np.cross(g, av), bv.shape))

    return _record("cross", np.cross(av, bv), (a, b), vjp)


def eigh(a) -> tuple[Tensor, Tensor]:
    """Symmetric eigendecomposition of the last two axes.

    Returns (eigenvalues, eigenvectors) as two tensors. Backward symmetrizes
    the input gradient and clamps eigen-gaps from below at ``EIGEN_GAP_FLOOR``.
    """
    a = as_tensor(a)
    av = a.value
    if av.shape[-1] != av.shape[-2]:
        raise ValueError("eigh needs square matrices")
    sym = 0.5 * (av + np.swapaxes(av, -1, -2))
    lam, vec = np.linalg.eigh(sym)
    lam_t = _record("eigh.values", lam, (a,), None)
    vec_t = _record("eigh.vectors", vec, (a,), None)
    tape = _active_tape()
    if tape is None or lam_t._tape is not tape:
        return lam_t, vec_t

    # Both outputs were recorded with placeholder vjps. Replace them: the
    # values entry passes its gradient through unchanged and the vectors entry
    # carries the full matrix formula, so gradients from both outputs combine.
    gap = lam[..., None, :] - lam[..., :, None]
    sign = np.where(gap >= 0, 1.0, -1.0)
    gap = sign * np.maximum(np.abs(gap), EIGEN_GAP_FLOOR)
    F = 1.0 / gap
    idx = np.arange(lam.shape[-1])
    F[..., idx, idx] = 0.0
    vt = np.swapaxes(vec, -1, -2)

    def sym_part(m):
        return 0.5 * (m + np.swapaxes(m, -1, -2))

    def vjp_values(g):
        ga = vec @ (g[..., :, None] * vt)
        return (sym_part(ga),)

    def vjp_vectors(g):
        inner = F * (vt @ g)
        ga = vec @ inner @ vt
        return (sym_part(ga),)

    entries = tape.entries
    n_vals, nodes_v, _ = entries[-2]
    n_vecs, nodes_w, _ = entries[-1]
    entries[-2] = (n_vals, nodes_v, vjp_values)
    entries[-1] = (n_vecs, nodes_w, vjp_vectors)
    return lam_t, vec_t


def trace(a) -> Tensor:
    a = as_tensor(a)
    n = a.shape[-1]
    idx = np.arange(n)
    return getitem(a, (..., idx, idx)).sum(axis=-1)


# ---------------------------------------------------------------------------
# composites


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a - np.max(a.value, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def norm(a, axis=-1, keepdims=False) -> Tensor:
    return sqrt(square(a).sum(axis=axis, keepdims=keepdims))


def dot(a, b, axis=-1, keepdims=False) -> Tensor:
    return (a * b).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# test oracle


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    Error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    f0 = float(f(Tensor(x)).value)
    if not np.isfinite(f0):
        raise NonFiniteError("f(x) is not finite")
    _, (g,) = grad(f, x)
    g = g.ravel()
    flat = x.ravel()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x.shape))).value)
        fm = float(f(Tensor(xm.reshape(x.shape))).value)
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(g[i] - num) / (abs(g[i]) + 1e-8))
    return worst
