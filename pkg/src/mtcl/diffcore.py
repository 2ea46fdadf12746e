"""Small reverse-mode autodiff over dense float64 arrays, plus Adam.

Only the operations a multilayer perceptron and its losses need are
provided.  Every op records its parents and a closure that pushes the
upstream gradient back to them; :meth:`Value.backward` walks the graph in
reverse topological order and accumulates (sums) gradients for values used
more than once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """A node in the computation graph holding ``data`` and, after backward, ``grad``."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op")
    # make `ndarray * Value` dispatch to Value.__rmul__ instead of broadcasting over objects
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, op={self.op!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every value reachable from this scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {self.data.shape}")
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _check_broadcast(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Value:
    a, b = lift(a), lift(b)
    _check_broadcast("add", a, b)
    out = Value(a.data + b.data, (a, b), "add")

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _backward
    return out


def sub(a, b) -> Value:
    a, b = lift(a), lift(b)
    _check_broadcast("sub", a, b)
    out = Value(a.data - b.data, (a, b), "sub")

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = _backward
    return out


def mul(a, b) -> Value:
    """Elementwise product with numpy broadcasting."""
    a, b = lift(a), lift(b)
    _check_broadcast("mul", a, b)
    out = Value(a.data * b.data, (a, b), "mul")

    def _backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _backward
    return out


def scale(a, c: float) -> Value:
    a = lift(a)
    c = float(c)
    out = Value(a.data * c, (a,), "scale")
    out._backward = lambda g: a._accumulate(g * c)
    return out


def matmul(a, b) -> Value:
    a, b = lift(a), lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Value(a.data @ b.data, (a, b), "matmul")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = _backward
    return out


def tanh(a) -> Value:
    a = lift(a)
    t = np.tanh(a.data)
    out = Value(t, (a,), "tanh")
    out._backward = lambda g: a._accumulate(g * (1.0 - t * t))
    return out


def relu(a) -> Value:
    a = lift(a)
    mask = a.data > 0
    out = Value(np.maximum(a.data, 0.0), (a,), "relu")  # keeps NaN visible
    out._backward = lambda g: a._accumulate(g * mask)
    return out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Value:
    a = lift(a)
    s = _stable_sigmoid(a.data)
    out = Value(s, (a,), "sigmoid")
    out._backward = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def softmax(a) -> Value:
    """Softmax along the last axis."""
    a = lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Value(p, (a,), "softmax")

    def _backward(g):
        a._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    out._backward = _backward
    return out


def log_softmax(a) -> Value:
    """Numerically stable log of softmax along the last axis."""
    a = lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ls = z - lse
    p = np.exp(ls)
    out = Value(ls, (a,), "log_softmax")
    out._backward = lambda g: a._accumulate(g - p * g.sum(axis=-1, keepdims=True))
    return out


def log(a) -> Value:
    a = lift(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    out = Value(np.log(a.data), (a,), "log")
    out._backward = lambda g: a._accumulate(g / a.data)
    return out


def clip(a, lo: float, hi: float) -> Value:
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    a = lift(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = Value(np.clip(a.data, lo, hi), (a,), "clip")
    out._backward = lambda g: a._accumulate(g * inside)
    return out


def rows(a, start: int, stop: int) -> Value:
    """Rows ``start:stop`` of a 2-D value."""
    a = lift(a)
    out = Value(a.data[start:stop], (a,), "rows")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    out._backward = _backward
    return out


def sum_(a, axis=None) -> Value:
    a = lift(a)
    out = Value(a.data.sum(axis=axis), (a,), "sum")

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    out._backward = _backward
    return out


def mean(a, axis=None) -> Value:
    a = lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty input")
    return scale(sum_(a, axis=axis), 1.0 / n)


@dataclass
class AdamState:
    """Adam moment buffers for a fixed list of parameter arrays."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params, learning_rate: float = 0.002, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params],
            second_moment=[np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params],
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    A parameter array whose gradient is identically zero is skipped entirely
    (moments included), so a zero gradient never moves a parameter even when
    its moment buffers carry momentum from earlier steps.
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment buffers")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ShapeError(
                f"adam_step: parameter {i} shape {p.shape}, grad {g.shape}, "
                f"moment {state.first_moment[i].shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if not g.any():
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
