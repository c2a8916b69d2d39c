"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: a ``Tape`` records every primitive applied to tensors that
live on it, and ``Tape.backward`` replays the records in reverse to produce
gradients of a scalar root with respect to the tape's leaves. Tensors that
were never registered on a tape act as constants and contribute no
gradient. Tapes are rebuilt for every forward pass.

A tape is single-threaded; independent tapes may run concurrently on
independent threads. Detached tensors are treated as immutable and may be
shared freely.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "GradientMap",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "square",
    "maximum",
    "minimum",
    "tensor_sum",
    "reshape",
    "concat",
    "gather_columns",
    "layer_norm",
    "dropout",
]

_LAYER_NORM_EPS = 1e-5


class Tensor:
    """A float64 array, optionally attached to a differentiation tape.

    ``tape`` and ``node_id`` are both None for constants/detached tensors.
    The wrapped array must not be mutated once the tensor participates in
    a taped computation.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

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

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    """One recorded primitive: pairs of (parent node id, grad function)."""

    __slots__ = ("op", "targets")

    def __init__(self, op, targets):
        self.op = op
        self.targets = targets


class Tape:
    """Ordered record of primitives; parents always precede children."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Register an input tensor whose gradient will be tracked."""
        out = Tensor(data)
        nid = self._append(_Node("leaf", ()))
        out.tape = self
        out.node_id = nid
        return out

    def _append(self, node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def _record(self, op, out_data, targets) -> Tensor:
        nid = self._append(_Node(op, tuple(targets)))
        return Tensor(out_data, self, nid)

    def backward(self, root: Tensor) -> "GradientMap":
        """Accumulate d(root)/d(node) for every node reachable from root.

        The root must be a scalar (size 1) recorded on this tape. Each
        node is visited exactly once, in reverse recording order, so
        repeated calls give bitwise-identical results.
        """
        if root.tape is not self:
            raise ValueError("backward: root tensor is not on this tape")
        if root.size != 1:
            raise ValueError(
                f"backward: root must be scalar, got shape {root.shape}"
            )
        adjoints: list = [None] * (root.node_id + 1)
        adjoints[root.node_id] = np.ones_like(root.data)
        for nid in range(root.node_id, -1, -1):
            g = adjoints[nid]
            if g is None:
                continue
            for pid, fn in self._nodes[nid].targets:
                contrib = fn(g)
                if adjoints[pid] is None:
                    adjoints[pid] = contrib
                else:
                    adjoints[pid] = adjoints[pid] + contrib
        return GradientMap(self, adjoints)


class GradientMap:
    """Result of a backward pass; unreachable leaves read as zeros."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape:
            raise ValueError("gradient requested for tensor on a different tape")
        if tensor.node_id < len(self._adjoints):
            g = self._adjoints[tensor.node_id]
            if g is not None:
                return g
        return np.zeros_like(tensor.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce grad over the axes that were broadcast up from shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, a, b, out_data, grad_a, grad_b) -> Tensor:
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out_data)
    targets = []
    if a.node_id is not None:
        targets.append((a.node_id, grad_a))
    if b.node_id is not None:
        targets.append((b.node_id, grad_b))
    return tape._record(op, out_data, targets)


def _unary(op, a, out_data, grad_a) -> Tensor:
    if a.tape is None:
        return Tensor(out_data)
    return a.tape._record(op, out_data, [(a.node_id, grad_a)])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    return _binary(
        "add", a, b, a.data + b.data,
        lambda g: _unbroadcast(g, ash),
        lambda g: _unbroadcast(g, bsh),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    return _binary(
        "sub", a, b, a.data - b.data,
        lambda g: _unbroadcast(g, ash),
        lambda g: _unbroadcast(-g, bsh),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _binary(
        "mul", a, b, ad * bd,
        lambda g: _unbroadcast(g * bd, ad.shape),
        lambda g: _unbroadcast(g * ad, bd.shape),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _binary(
        "div", a, b, ad / bd,
        lambda g: _unbroadcast(g / bd, ad.shape),
        lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _unary("neg", a, -a.data, lambda g: -g)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {ad.shape} and {bd.shape}"
        )
    return _binary(
        "matmul", a, b, ad @ bd,
        lambda g: g @ bd.T,
        lambda g: ad.T @ g,
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is 0 (subgradient choice)
    mask = a.data > 0.0
    return _unary("relu", a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _unary("square", a, ad * ad, lambda g: 2.0 * ad * g)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    wa = np.where(ad > bd, 1.0, np.where(ad == bd, 0.5, 0.0))
    return _binary(
        "maximum", a, b, np.maximum(ad, bd),
        lambda g: _unbroadcast(g * wa, ad.shape),
        lambda g: _unbroadcast(g * (1.0 - wa), bd.shape),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    wa = np.where(ad < bd, 1.0, np.where(ad == bd, 0.5, 0.0))
    return _binary(
        "minimum", a, b, np.minimum(ad, bd),
        lambda g: _unbroadcast(g * wa, ad.shape),
        lambda g: _unbroadcast(g * (1.0 - wa), bd.shape),
    )


def tensor_sum(a) -> Tensor:
    """Sum of all elements, returned as a scalar tensor."""
    a = as_tensor(a)
    shape = a.data.shape
    return _unary(
        "sum", a, np.asarray(a.data.sum()),
        lambda g: np.broadcast_to(g, shape),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _unary(
        "reshape", a, a.data.reshape(shape),
        lambda g: g.reshape(old),
    )


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    tape = _tape_of(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if tape is None:
        return Tensor(out)
    targets = []
    offset = 0
    for t in tensors:
        n = t.data.shape[axis]
        if t.node_id is not None:
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + n)
            targets.append((t.node_id, lambda g, sl=tuple(sl): g[sl]))
        offset += n
    return tape._record("concat", out, targets)


def gather_columns(a, idx) -> Tensor:
    """Select columns of a 2-D tensor; duplicate indices accumulate."""
    a = as_tensor(a)
    ad = a.data
    if ad.ndim != 2:
        raise ValueError(f"gather_columns: expected 2-D tensor, got {ad.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def grad(g):
        gz = np.zeros_like(ad)
        np.add.at(gz, (slice(None), idx), g)
        return gz

    return _unary("gather_columns", a, ad[:, idx], grad)


def layer_norm(x, gamma, beta, eps: float = _LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, gd = x.data, gamma.data
    h = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gd + beta.data
    tape = _tape_of(x, gamma, beta)
    if tape is None:
        return Tensor(out)
    lead = tuple(range(xd.ndim - 1))
    targets = []
    if x.node_id is not None:
        def grad_x(g):
            gy = g * gd
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = np.mean(gy * y, axis=-1, keepdims=True)
            return inv * (gy - m1 - y * m2)

        targets.append((x.node_id, grad_x))
    if gamma.node_id is not None:
        targets.append((gamma.node_id, lambda g: (g * y).sum(axis=lead)))
    if beta.node_id is not None:
        targets.append((beta.node_id, lambda g: g.sum(axis=lead)))
    del h
    return tape._record("layer_norm", out, targets)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Train-time inverted dropout; identity when rate is 0."""
    if rate == 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = 1.0 - rate
    mask = (rng.random(size=x.data.shape) >= rate) / keep
    return mul(x, Tensor(mask))
