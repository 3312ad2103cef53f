"""Small dense-network numeric core.

A :class:`Graph` is a static list of nodes built once (inputs, parameters,
constants and a fixed set of ops) and evaluated many times with different
bindings. Values are 2-D float64 arrays; a scalar is a ``(1, 1)`` array.

Broadcasting is deliberately narrow: the elementwise binary ops accept
either identical shapes, a ``(1, n)`` row on the right-hand side, or an
``(m, 1)`` column on the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdamState",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "adam_step",
    "as_matrix",
    "log_softmax",
    "softmax",
]


class GraphError(Exception):
    """Misuse of a graph (unbound input, non-scalar loss, ...)."""


class ShapeError(GraphError, ValueError):
    """Operand shapes are inconsistent with an op's signature."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


def as_matrix(x) -> np.ndarray:
    """Coerce scalars, vectors and 2-D inputs to a float64 matrix."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def softmax(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    name: str | None = None
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None


class Graph:
    """Static computation graph with reverse-mode differentiation.

    Nodes are appended in construction order, so the node list is already a
    topological order. Build methods return integer node ids.

    >>> g = Graph()
    >>> x = g.param("x")
    >>> loss = g.sum(g.square(x))
    >>> _ = g.forward({"x": [[3.0]]})
    >>> g.backward(loss)["x"]
    array([[6.]])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _add(self, op, inputs=(), name=None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: unknown input node {i}")
        self.nodes.append(Node(op, tuple(inputs), name, attrs))
        return len(self.nodes) - 1

    def _named(self, op, name) -> int:
        if name in self._by_name:
            raise GraphError(f"duplicate node name {name!r}")
        idx = self._add(op, name=name)
        self._by_name[name] = idx
        return idx

    def input(self, name: str) -> int:
        return self._named("input", name)

    def param(self, name: str) -> int:
        return self._named("param", name)

    def const(self, value) -> int:
        return self._add("const", value=as_matrix(value).copy())

    def affine(self, x, w, b) -> int:
        """``x @ w + b`` with ``b`` a ``(1, out)`` row."""
        return self._add("affine", (x, w, b))

    def matmul(self, a, b) -> int:
        return self._add("matmul", (a, b))

    def tanh(self, a) -> int:
        return self._add("tanh", (a,))

    def sigmoid(self, a) -> int:
        return self._add("sigmoid", (a,))

    def softmax(self, a) -> int:
        return self._add("softmax", (a,))

    def log_softmax(self, a) -> int:
        return self._add("log_softmax", (a,))

    def log(self, a) -> int:
        return self._add("log", (a,))

    def add(self, a, b) -> int:
        return self._add("add", (a, b))

    def sub(self, a, b) -> int:
        return self._add("sub", (a, b))

    def mul(self, a, b) -> int:
        return self._add("mul", (a, b))

    def scale(self, a, c: float) -> int:
        return self._add("scale", (a,), c=float(c))

    def square(self, a) -> int:
        return self._add("square", (a,))

    def sum(self, a, axis: int | None = None) -> int:
        return self._add("sum", (a,), axis=axis)

    def mean(self, a, axis: int | None = None) -> int:
        return self._add("mean", (a,), axis=axis)

    def column(self, a, j: int) -> int:
        return self._add("column", (a,), j=int(j))

    def sqdist(self, a, b) -> int:
        """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
        return self._add("sqdist", (a, b))

    def bce_logits(self, logits, target) -> int:
        """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
        return self._add("bce_logits", (logits, target))

    def node_id(self, name: str) -> int:
        return self._by_name[name]

    @property
    def param_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "param"]

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "input"]

    # -- evaluation -------------------------------------------------------

    def forward(self, bindings: dict) -> list[np.ndarray]:
        """Evaluate every node; returns the list of node values.

        ``bindings`` must supply every input and parameter by name.
        """
        for idx, node in enumerate(self.nodes):
            if node.op in ("input", "param"):
                if node.name not in bindings:
                    raise GraphError(f"node {idx} ({node.op} {node.name!r}) is unbound")
                node.value = as_matrix(bindings[node.name])
                continue
            if node.op == "const":
                node.value = node.attrs["value"]
                continue
            args = [self.nodes[i].value for i in node.inputs]
            try:
                node.value = self._eval(node, args)
            except ShapeError as exc:
                label = f" {node.name!r}" if node.name else ""
                raise ShapeError(f"node {idx} ({node.op}{label}): {exc}") from None
        return [n.value for n in self.nodes]

    @staticmethod
    def _check_binary(a, b):
        if a.shape == b.shape:
            return
        if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
            return
        if b.shape[1] == 1 and b.shape[0] == a.shape[0]:
            return
        raise ShapeError(f"incompatible operands {a.shape} and {b.shape}")

    def _eval(self, node, args):
        op = node.op
        if op == "affine":
            x, w, b = args
            if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
                raise ShapeError(f"x {x.shape}, w {w.shape}, b {b.shape}")
            return x @ w + b
        if op == "matmul":
            a, b = args
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
            return a @ b
        if op == "tanh":
            return np.tanh(args[0])
        if op == "sigmoid":
            return _sigmoid(args[0])
        if op == "softmax":
            return softmax(args[0])
        if op == "log_softmax":
            return log_softmax(args[0])
        if op == "log":
            return np.log(args[0])
        if op in ("add", "sub", "mul"):
            a, b = args
            self._check_binary(a, b)
            if op == "add":
                return a + b
            if op == "sub":
                return a - b
            return a * b
        if op == "scale":
            return args[0] * node.attrs["c"]
        if op == "square":
            return args[0] * args[0]
        if op in ("sum", "mean"):
            a = args[0]
            axis = node.attrs["axis"]
            if axis is None:
                out = a.sum().reshape(1, 1)
                return out / a.size if op == "mean" else out
            out = a.sum(axis=axis, keepdims=True)
            return out / a.shape[axis] if op == "mean" else out
        if op == "column":
            a = args[0]
            j = node.attrs["j"]
            if not 0 <= j < a.shape[1]:
                raise ShapeError(f"column {j} out of range for {a.shape}")
            return a[:, j : j + 1].copy()
        if op == "sqdist":
            a, b = args
            if a.shape[1] != b.shape[1]:
                raise ShapeError(f"row dimensions differ: {a.shape} vs {b.shape}")
            diff = a[:, None, :] - b[None, :, :]
            return np.einsum("ijk,ijk->ij", diff, diff)
        if op == "bce_logits":
            z, t = args
            if z.shape != t.shape:
                raise ShapeError(f"logits {z.shape} vs target {t.shape}")
            # softplus(z) - t*z, computed without overflow
            return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - t * z
        raise GraphError(f"unknown op {op!r}")

    def value(self, node_id: int) -> np.ndarray:
        v = self.nodes[node_id].value
        if v is None:
            raise GraphError(f"node {node_id} has not been evaluated")
        return v

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Gradients of a scalar node w.r.t. every parameter, keyed by name.

        Parameters the loss does not depend on receive zero gradients.
        """
        lv = self.value(loss)
        if lv.shape != (1, 1):
            raise GraphError(f"loss node {loss} is not scalar (shape {lv.shape})")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones((1, 1))
        for idx in range(loss, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or not node.inputs:
                continue
            args = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, self._vjp(node, args, g)):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        out = {}
        for idx, node in enumerate(self.nodes):
            if node.op == "param":
                g = grads[idx]
                out[node.name] = np.zeros_like(node.value) if g is None else g
        return out

    def _vjp(self, node, args, g):
        op = node.op
        y = node.value
        if op == "affine":
            x, w, _ = args
            return g @ w.T, x.T @ g, g.sum(axis=0, keepdims=True)
        if op == "matmul":
            a, b = args
            return g @ b.T, a.T @ g
        if op == "tanh":
            return (g * (1.0 - y * y),)
        if op == "sigmoid":
            return (g * y * (1.0 - y),)
        if op == "softmax":
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
        if op == "log_softmax":
            return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)
        if op == "log":
            return (g / args[0],)
        if op == "add":
            return g, _reduce_to(g, args[1].shape)
        if op == "sub":
            return g, _reduce_to(-g, args[1].shape)
        if op == "mul":
            a, b = args
            return g * b, _reduce_to(g * a, b.shape)
        if op == "scale":
            return (g * node.attrs["c"],)
        if op == "square":
            return (2.0 * args[0] * g,)
        if op in ("sum", "mean"):
            a = args[0]
            axis = node.attrs["axis"]
            full = np.broadcast_to(g, a.shape).copy()
            if op == "mean":
                full /= a.size if axis is None else a.shape[axis]
            return (full,)
        if op == "column":
            a = args[0]
            out = np.zeros_like(a)
            j = node.attrs["j"]
            out[:, j : j + 1] = g
            return (out,)
        if op == "sqdist":
            a, b = args
            # d/da_i = 2 sum_j g_ij (a_i - b_j)
            ga = 2.0 * (g.sum(axis=1, keepdims=True) * a - g @ b)
            gb = 2.0 * (g.sum(axis=0, keepdims=True).T * b - g.T @ a)
            return ga, gb
        if op == "bce_logits":
            z, t = args
            return g * (_sigmoid(z) - t), -g * z
        raise GraphError(f"no gradient rule for {op!r}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.

    Returns a new parameter dict; ``state`` is updated in place and returned.
    Raises :class:`NonFiniteError` on any non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state
