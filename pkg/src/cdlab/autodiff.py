"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives the latent graph-ODE needs are provided. Every node value
is checked for finiteness at construction; a non-finite result raises
:class:`NonFiniteError` immediately so the failing stage can be named.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Node:
    """A value in the compute graph.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that do not need one).
    """

    __slots__ = ("value", "parents", "op", "backward_fn", "requires_grad", "grad")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        op: str = "leaf",
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
    ):
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.value = value
        self.parents = parents
        self.op = op
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar so integrators can treat nodes and arrays alike
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def param(value) -> Node:
    """A leaf that receives a gradient."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: Sequence[Node], op: str, backward_fn: Callable) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, tuple(parents), op, backward_fn if needs else None, needs)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = const(a), const(b)

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), "mul", backward)


def div(a, b) -> Node:
    a, b = const(a), const(b)
    out = a.value / b.value

    def backward(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "div", backward)


def square(a) -> Node:
    a = const(a)
    return _make(a.value * a.value, (a,), "square", lambda g: (2.0 * a.value * g,))


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Node:
    a = const(a)
    return _make(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = const(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), "relu", lambda g: (g * on,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = const(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), "clip", lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Node:
    a, b = const(a), const(b)

    def backward(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.value @ b.value, (a, b), "matmul", backward)


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = const(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), "sum", backward)


def mean(a) -> Node:
    a = const(a)
    n = a.value.size
    return _make(
        a.value.mean(), (a,), "mean", lambda g: (np.full(a.shape, g / n),)
    )


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = const(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), "softmax", backward)


# ---------------------------------------------------------------------------
# structural


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    ax = axis % nodes[0].ndim
    sizes = [n.shape[ax] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(
        np.concatenate([n.value for n in nodes], axis=ax), nodes, "concat", backward
    )


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([n.value for n in nodes], axis=axis), nodes, "stack", backward)


def index(a, key) -> Node:
    """Basic or advanced indexing; backward scatters with accumulation."""
    a = const(a)

    basic = isinstance(key, (slice, int)) or (
        isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
    )

    def backward(g):
        out = np.zeros(a.shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), "index", backward)


def reshape(a, shape) -> Node:
    a = const(a)
    return _make(
        a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),)
    )


def gather(a, idx: np.ndarray) -> Node:
    """Rows ``a[idx]``; the adjoint of :func:`scatter_sum`."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        return (_segment_sum(g, idx, n),)

    return _make(a.value[idx], (a,), "gather", backward)


def scatter_sum(a, idx: np.ndarray, n: int) -> Node:
    """Sum rows of ``a`` into ``n`` buckets given by ``idx``."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)
    return _make(_segment_sum(a.value, idx, n), (a,), "scatter_sum", lambda g: (g[idx],))


def _segment_sum(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(np.float64)
    m = len(idx)
    routing = sparse.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    flat = values.reshape(m, int(np.prod(values.shape[1:])))
    return np.asarray(routing @ flat).reshape((n,) + values.shape[1:])


def segment_softmax(logits, idx: np.ndarray, n: int) -> Node:
    """Softmax of a 1-D ``logits`` within each segment of ``idx``.

    Composed from exp, gather, scatter_sum and div. The per-segment max shift
    is a constant and leaves the result (and its gradient) unchanged.
    """
    logits = const(logits)
    idx = np.asarray(idx, dtype=np.int64)
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, idx, logits.value)
    e = exp(logits - seg_max[idx])
    denom = scatter_sum(e, idx, n)
    return e / gather(denom, idx)


def straight_through(scores, binarize: Callable[[np.ndarray], np.ndarray]) -> Node:
    """Binary mask ``binarize(scores)`` whose backward pass is the identity."""
    scores = const(scores)
    mask = np.asarray(binarize(scores.value), dtype=np.float64)
    return _make(mask, (scores,), "straight_through", lambda g: (g,))


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    a = const(a)
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node, leaves: Iterable[Node] | None = None) -> dict[int, np.ndarray]:
    """Accumulate gradients of scalar ``root`` into every reachable leaf.

    Returns a map from ``id(leaf)`` to its gradient. Leaves passed explicitly
    but unreachable from ``root`` map to zeros.
    """
    if root.value.shape != ():
        raise ValueError("backward requires scalar output")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    result: dict[int, np.ndarray] = {}
    for node in order:
        if node.backward_fn is None and node.requires_grad:
            result[id(node)] = node.grad
    if leaves is not None:
        for leaf in leaves:
            result.setdefault(id(leaf), np.zeros(leaf.shape))
    return result


def grad(root: Node, leaves: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of ``root`` for ``leaves``, in order."""
    table = backward(root, leaves)
    return [table[id(leaf)] for leaf in leaves]
