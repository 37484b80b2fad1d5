"""Reverse-mode differentiation on a per-pass tape, plus an MLP container and Adam.

Every node on the tape holds a dense float64 array (a scalar is a 0-d array).
The tape is append-only, so parents always precede children and the reverse
sweep is a single pass over the node list.

    >>> g = Graph()
    >>> x = g.param(3.0)
    >>> loss = square(x)
    >>> g.backward(loss)[0]
    array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Graph", "Var", "Mlp", "AdamState", "adam_step", "clip_grad_norm",
    "eval_scalar", "add", "sub", "mul", "div", "neg", "dot", "matmul",
    "matvec", "tanh", "relu", "softplus", "square", "mean", "vsum",
    "minimum", "l2norm", "concat", "transpose", "row_normalize",
]


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        op = self.graph.ops[self.index]
        return f"Var(#{self.index} {op}, shape={self.shape})"


class Graph:
    """Append-only tape of array-valued nodes.

    ``roots`` lists the parameter nodes; :meth:`backward` returns one gradient
    per root in creation order.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.roots: list[int] = []
        self.adjoints: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.values)

    def _push(self, value, op, parents=(), vjp=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by '{op}'")
        for p in parents:
            if p >= len(self.values):
                raise ShapeError("parent index must precede the new node")
        self.values.append(value)
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        self.adjoints.append(None)
        return Var(self, len(self.values) - 1)

    def param(self, value) -> Var:
        v = self._push(np.array(value, dtype=np.float64), "param")
        self.roots.append(v.index)
        return v

    def const(self, value) -> Var:
        return self._push(np.array(value, dtype=np.float64), "const")

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.graph is not self:
                raise ShapeError("cannot mix nodes from different graphs")
            return x
        return self.const(x)

    def backward(self, loss: Var) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns d loss / d root."""
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            if g is None or self.vjps[i] is None:
                continue
            for p, gp in zip(self.parents[i], self.vjps[i](g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        self.adjoints = [
            a if a is not None else np.zeros_like(v) for a, v in zip(adj, self.values)
        ]
        return [self.adjoints[r] for r in self.roots]


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    raise ShapeError("at least one operand must be a graph node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    sa, sb = a.shape, b.shape
    return g._push(a.value + b.value, "add", (a.index, b.index),
                   lambda u: (_unbroadcast(u, sa), _unbroadcast(u, sb)))


def sub(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    sa, sb = a.shape, b.shape
    return g._push(a.value - b.value, "sub", (a.index, b.index),
                   lambda u: (_unbroadcast(u, sa), _unbroadcast(-u, sb)))


def neg(a: Var) -> Var:
    return a.graph._push(-a.value, "neg", (a.index,), lambda u: (-u,))


def mul(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    va, vb = a.value, b.value
    return g._push(va * vb, "mul", (a.index, b.index),
                   lambda u: (_unbroadcast(u * vb, va.shape), _unbroadcast(u * va, vb.shape)))


def div(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    va, vb = a.value, b.value
    if np.any(vb == 0.0):
        raise NumericError("division by zero")
    out = va / vb
    return g._push(out, "div", (a.index, b.index),
                   lambda u: (_unbroadcast(u / vb, va.shape),
                              _unbroadcast(-u * out / vb, vb.shape)))


def matmul(a, b) -> Var:
    """Matrix product with numpy semantics for 1-d and 2-d operands."""
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    va, vb = a.value, b.value
    if va.ndim == 0 or vb.ndim == 0 or va.ndim > 2 or vb.ndim > 2:
        raise ShapeError(f"matmul needs 1-d or 2-d operands, got {va.shape} @ {vb.shape}")
    if va.shape[-1] != vb.shape[0]:
        raise ShapeError(f"matmul shape mismatch {va.shape} @ {vb.shape}")

    def vjp(u):
        if va.ndim == 2 and vb.ndim == 2:
            return u @ vb.T, va.T @ u
        if va.ndim == 2:  # matrix @ vector
            return np.outer(u, vb), va.T @ u
        if vb.ndim == 2:  # vector @ matrix
            return vb @ u, np.outer(va, u)
        return u * vb, u * va  # dot

    return g._push(va @ vb, "matmul", (a.index, b.index), vjp)


def dot(a, b) -> Var:
    return matmul(a, b)


def matvec(m, v) -> Var:
    return matmul(m, v)


def transpose(a: Var) -> Var:
    return a.graph._push(a.value.T, "transpose", (a.index,), lambda u: (u.T,))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return a.graph._push(t, "tanh", (a.index,), lambda u: (u * (1.0 - t * t),))


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return a.graph._push(a.value * mask, "relu", (a.index,), lambda u: (u * mask,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Var) -> Var:
    """ln(1 + e^x), evaluated stably."""
    x = a.value
    return a.graph._push(np.logaddexp(0.0, x), "softplus", (a.index,),
                         lambda u: (u * _sigmoid(x),))


def square(a: Var) -> Var:
    x = a.value
    return a.graph._push(x * x, "square", (a.index,), lambda u: (2.0 * u * x,))


def vsum(a: Var, axis=None) -> Var:
    x = a.value
    out = x.sum(axis=axis)

    def vjp(u):
        if axis is None:
            return (np.broadcast_to(u, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(u, axis), x.shape).copy(),)

    return a.graph._push(out, "sum", (a.index,), vjp)


def mean(a: Var, axis=None) -> Var:
    x = a.value
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise NumericError("mean of an empty array")
    s = vsum(a, axis)
    return s.graph._push(s.value / n, "mean", (s.index,), lambda u: (u / n,))


def minimum(a: Var, c: float) -> Var:
    """Elementwise min(a, c) against a constant; clipped entries get zero gradient."""
    x = a.value
    keep = x < c
    return a.graph._push(np.where(keep, x, c), "min", (a.index,), lambda u: (u * keep,))


def l2norm(a: Var) -> Var:
    x = a.value
    n = float(np.sqrt(np.sum(x * x)))
    if n == 0.0:
        raise NumericError("l2norm of a zero vector has no gradient")
    return a.graph._push(n, "l2norm", (a.index,), lambda u: (u * x / n,))


def row_normalize(a: Var, radius: float = 1.0) -> Var:
    """Scale each row of a 2-d node to Euclidean norm ``radius``."""
    x = a.value
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise NumericError("cannot normalize a zero row")
    y = x / n

    def vjp(u):
        return (radius * (u - y * np.sum(u * y, axis=-1, keepdims=True)) / n,)

    return a.graph._push(radius * y, "row_normalize", (a.index,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Var:
    g = _graph_of(*parts)
    nodes = [g.lift(p) for p in parts]
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(u):
        return tuple(np.split(u, cuts, axis=axis))

    return g._push(out, "concat", tuple(n.index for n in nodes), vjp)


def eval_scalar(graph: Graph, build: Callable[[Graph], Var]) -> tuple[float, Var]:
    """Run ``build`` on ``graph`` and return the scalar value with its node."""
    node = build(graph)
    if node.value.size != 1:
        raise ShapeError(f"expression is not scalar: shape {node.shape}")
    return float(node.value), node


_ACTIVATIONS = {"tanh": (np.tanh, tanh), "relu": (lambda x: np.maximum(x, 0.0), relu)}
_OUTPUTS = ("identity", "l2-normalize")


@dataclass
class Mlp:
    """Dense feed-forward net; rows are samples, ``x @ W + b`` per layer.

    The ``l2-normalize`` output scales every output row to norm sqrt(width).
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in _OUTPUTS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("layer count does not match widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ShapeError(f"layer {i} has shape {w.shape}/{b.shape}")

    @classmethod
    def init(cls, widths, rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity") -> "Mlp":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(widths, weights, biases, hidden_activation, output_activation)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} parameters, got {flat.size}")
        pos = 0
        for i in range(len(self.weights)):
            w, b = self.weights[i], self.biases[i]
            self.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size

    def copy(self) -> "Mlp":
        return Mlp(list(self.widths), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.hidden_activation,
                   self.output_activation)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        act = _ACTIVATIONS[self.hidden_activation][0]
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act(h)
        if self.output_activation == "l2-normalize":
            h = np.sqrt(self.out_dim) * h / np.linalg.norm(h, axis=-1, keepdims=True)
        return h

    def build(self, graph: Graph, x, params: Sequence[Var] | None = None) -> Var:
        """Record the forward pass on ``graph``.

        ``params`` are nodes ordered like :meth:`parameters`; by default the
        current weights enter as constants.
        """
        if params is None:
            params = [graph.const(p) for p in self.parameters()]
        act = _ACTIVATIONS[self.hidden_activation][1]
        h = graph.lift(x)
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = add(matmul(h, params[2 * i]), params[2 * i + 1])
            if i < last:
                h = act(h)
        if self.output_activation == "l2-normalize":
            h = row_normalize(h, np.sqrt(self.out_dim))
        return h


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state``; returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.first_moment.shape != params.shape:
        raise ShapeError(f"adam shapes disagree: params {params.shape}, grad {grad.shape}, "
                         f"state {state.first_moment.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grad: np.ndarray, c: float) -> np.ndarray:
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= c:
        return grad.copy()
    return grad * (c / norm)
