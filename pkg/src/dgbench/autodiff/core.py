"""Tensors, the per-step computation graph and reverse-mode differentiation."""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite output in op '{op}'")


class Tensor:
    """Dense float64 array that can take part in a computation graph.

    Leaf tensors (parameters, inputs, constants) have ``node is None``.
    Tensors produced by :meth:`Graph.forward` remember the graph and the
    index of the node that created them. The graph is held weakly: it owns
    its output tensors, and a strong back-reference would make every tape a
    reference cycle that outlives its last use until the cyclic GC runs.
    """

    __slots__ = ("data", "requires_grad", "_graph", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._graph = None
        self.node: int | None = None
        self.name = name

    @property
    def graph(self) -> Graph | None:
        return None if self._graph is None else self._graph()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass(frozen=True)
class OpDef:
    """Forward/backward pair for one op kind.

    ``forward(attrs, *arrays) -> (out, ctx)``; ``backward(attrs, ctx, grad_out)``
    returns one gradient (or ``None``) per input.
    """

    kind: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


OPS: dict[str, OpDef] = {}


def register_op(kind: str, forward, backward) -> OpDef:
    if kind in OPS:
        raise ValueError(f"op '{kind}' already registered")
    op = OPS[kind] = OpDef(kind, forward, backward)
    return op


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    ctx: Any


@dataclass
class Graph:
    """Append-only tape of op records for one forward pass.

    Nodes are appended as ops run, so ``nodes`` is always in topological
    order. Any tensor not produced by this graph counts as a leaf.
    """

    nodes: list[Node] = field(default_factory=list)

    def forward(self, kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        try:
            op = OPS[kind]
        except KeyError:
            raise KeyError(f"unknown op kind '{kind}'; known: {sorted(OPS)}") from None
        inputs = tuple(_as_tensor(t) for t in inputs)
        with np.errstate(all="ignore"):
            out, ctx = op.forward(attrs, *(t.data for t in inputs))
        out = np.asarray(out, dtype=np.float64)
        if not np.isfinite(out).all():
            raise NumericError(kind)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.requires_grad = any(t.requires_grad for t in inputs)
        result.name = None
        result._graph = weakref.ref(self)
        result.node = len(self.nodes)
        self.nodes.append(Node(kind, inputs, result, attrs, ctx))
        return result

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``params``.

        Parameters that do not influence the loss get zero gradients.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.graph is self and loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
            last = loss.node
            for node in reversed(self.nodes[: last + 1]):
                g_out = grads.pop(id(node.output), None)
                if g_out is None:
                    continue
                with np.errstate(all="ignore"):
                    g_in = OPS[node.kind].backward(node.attrs, node.ctx, g_out)
                for t, g in zip(node.inputs, g_in):
                    if g is None or not t.requires_grad:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
        elif loss.node is None:
            # loss is itself a leaf
            grads[id(loss)] = np.ones_like(loss.data)
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape))
        return out

    # convenience wrappers -------------------------------------------------

    def matmul(self, a, b):
        return self.forward("matmul", [a, b])

    def bias_add(self, x, b, axis: int = -1):
        return self.forward("bias_add", [x, b], axis=axis)

    def conv2d(self, x, w, stride: int = 1):
        return self.forward("conv2d", [x, w], stride=stride)

    def relu(self, x):
        return self.forward("relu", [x])

    def group_norm(self, x, gamma, beta, groups: int = 8, eps: float = 1e-5):
        return self.forward("group_norm", [x, gamma, beta], groups=groups, eps=eps)

    def global_avg_pool(self, x):
        return self.forward("global_avg_pool", [x])

    def dropout(self, x, p: float, rng: np.random.Generator | None):
        """Inverted dropout; ``rng=None`` or ``p == 0`` is the identity."""
        if rng is None or p == 0:
            return x
        keep = rng.random(x.shape) >= p
        return self.forward("dropout", [x], mask=keep, p=p)

    def add(self, a, b):
        return self.forward("add", [a, b])

    def sub(self, a, b):
        return self.forward("sub", [a, b])

    def mul(self, a, b):
        return self.forward("mul", [a, b])

    def scale(self, x, c: float):
        return self.forward("scale", [x], c=float(c))

    def exp(self, x):
        return self.forward("exp", [x])

    def log_softmax(self, x):
        return self.forward("log_softmax", [x])

    def softmax(self, x):
        return self.exp(self.log_softmax(x))

    def cross_entropy(self, logits, labels, weights=None):
        return self.forward("cross_entropy", [logits], labels=np.asarray(labels), weights=weights)

    def sum(self, x, axis=None, keepdims: bool = False):
        return self.forward("sum", [x], axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims: bool = False):
        return self.forward("mean", [x], axis=axis, keepdims=keepdims)

    def concat(self, xs, axis: int = 0):
        return self.forward("concat", list(xs), axis=axis)

    def sq_frobenius(self, x):
        return self.forward("sq_frobenius", [x])

    def rows(self, x, start: int, stop: int):
        return self.forward("rows", [x], start=start, stop=stop)

    def transpose(self, x):
        return self.forward("transpose", [x])

    def reshape(self, x, shape):
        return self.forward("reshape", [x], shape=tuple(shape))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def forward(graph: Graph, op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    return graph.forward(op, inputs, **(attrs or {}))


def backward(graph: Graph, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return graph.backward(loss, params)
