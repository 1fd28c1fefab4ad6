"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Graph`` is a tape: ops executed while a graph is active append their
output node in execution order, which is already a valid topological order,
so ``Graph.backward`` is a single reverse sweep over the node list.  When no
graph is active (inference), ops compute values only and keep no history.

All values are float64.  Elementwise ops broadcast by numpy rules and the
adjoints are summed back onto the original shapes.  Matrix ops treat the
last two axes as the matrix and broadcast any leading batch axes.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit


class AutodiffError(RuntimeError):
    pass


class SingularMatrixError(AutodiffError):
    pass


_state = threading.local()


def _active_graph():
    return getattr(_state, "graph", None)


class Graph:
    """Execution tape.  One graph per thread; backward may run once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False
        self._outer = None

    def __enter__(self):
        self._outer = _active_graph()
        _state.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.graph = self._outer
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

        ``loss`` must be scalar (shape () or size 1).  Calling backward a
        second time on the same graph raises, since the tape is consumed.
        """
        if self._consumed:
            raise AutodiffError("backward already ran on this graph; build a new graph")
        if loss.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Tensor:
    """Dense float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    # operator sugar; constants are wrapped on the fly
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        """Swap the last two axes (matrix transpose, batch axes untouched)."""
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result; record on the active tape when a gradient path exists."""
    g = _active_graph()
    out = Tensor(data)
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        g.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the adjoint over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is the logistic sigmoid."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum(a, g * expit(a.data))

    return _make(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside the bounds."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / n, a.data.shape))

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ValueError("transpose needs at least 2 dimensions")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(out, (a,), backward)


def index(a, idx) -> Tensor:
    """Basic slicing; the adjoint scatters back into a zero array."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out, (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices sum in the adjoint."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = a.data[indices]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        _accum(a, full)

    return _make(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out, (a, b), backward)


def _check_solution(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise SingularMatrixError(f"{what} produced non-finite values (singular input?)")


def linear_solve(a, b) -> Tensor:
    """Solve a @ x = b for x.

    Adjoints: gb = a^-T g, ga = -gb x^T, both via solves on a^T, so no
    explicit inverse is formed.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(f"linear_solve: {err}") from err
    _check_solution(out, "linear_solve")
    at = np.swapaxes(a.data, -1, -2)

    def backward(g):
        gb = np.linalg.solve(at, g)
        ga = -gb @ np.swapaxes(out, -1, -2)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def matrix_inverse(a) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.linalg.inv(a.data)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(f"matrix_inverse: {err}") from err
    _check_solution(out, "matrix_inverse")

    def backward(g):
        ot = np.swapaxes(out, -1, -2)
        _accum(a, -(ot @ g @ ot))

    return _make(out, (a,), backward)


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = as_tensor(a)
    try:
        out = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(f"cholesky: input not positive definite ({err})") from err

    def backward(g):
        # standard reverse-mode rule: solve twice against L^T instead of inverting
        l = out
        lt = np.swapaxes(l, -1, -2)
        phi = np.tril(lt @ g)
        idx = np.arange(l.shape[-1])
        phi[..., idx, idx] *= 0.5
        s = np.linalg.solve(lt, np.swapaxes(np.linalg.solve(lt, np.swapaxes(phi, -1, -2)), -1, -2))
        _accum(a, 0.5 * (s + np.swapaxes(s, -1, -2)))

    return _make(out, (a,), backward)


def has_nonfinite(t: Tensor) -> bool:
    return not np.isfinite(t.data).all()
