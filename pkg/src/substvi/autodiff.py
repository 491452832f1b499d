"""Reverse-mode automatic differentiation on a dynamic tape.

Values are float64 numpy arrays (scalars are 0-d arrays). The tape records
nodes in creation order, which for a dynamically built graph is already a
topological order, so the backward pass is a single reverse sweep. The
operation set is intentionally small: what a variational objective over
4-state transition matrices and one-hidden-layer encoders needs, nothing
more. No GPU, no higher-order derivatives.

Other modules may define custom primitives by constructing :class:`Node`
directly with a ``vjp`` closure; see ``distributions`` for an example.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "Node",
    "Tape",
    "add",
    "check_gradients",
    "clamp_min",
    "digamma",
    "div",
    "exp",
    "log",
    "log_gamma",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "neg",
    "power",
    "relu",
    "reshape",
    "softmax",
    "softplus",
    "stack",
    "sub",
    "total",
]


class DomainError(ValueError):
    """An operand left the mathematical domain of an operation."""


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One entry of the computation graph.

    ``vjp`` maps the upstream gradient to a tuple of gradients aligned with
    ``parents`` (entries may be None for non-differentiable arguments).
    """

    __slots__ = ("tape", "value", "parents", "vjp", "trainable", "grad", "index")

    def __init__(
        self,
        tape: "Tape",
        value,
        parents: tuple = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        trainable: bool = False,
    ):
        self.tape = tape
        self.value = _as_value(value)
        self.parents = parents
        self.vjp = vjp
        self.trainable = trainable
        self.grad: np.ndarray | None = None
        self.index = tape._append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, trainable={self.trainable})"

    # Operator sugar; constants are lifted onto the same tape.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.constant(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        return total(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Node":
        return reshape(self, shape)


class Tape:
    """Ordered node list plus a registry of trainable leaves.

    A tape is built fresh per use (per training iteration); it is not
    thread-safe and must not be shared across threads.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def _append(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def __len__(self) -> int:
        return len(self._nodes)

    def constant(self, value) -> Node:
        if isinstance(value, Node):
            if value.tape is not self:
                raise ValueError("node belongs to a different tape")
            return value
        return Node(self, value)

    def leaf(self, value, trainable: bool = True) -> Node:
        """Wrap ``value`` as a leaf. A given ndarray object is wrapped at
        most once per tape, so repeated encoder calls share one node."""
        if isinstance(value, np.ndarray):
            key = id(value)
            found = self._leaves.get(key)
            if found is not None:
                return found
            node = Node(self, value, trainable=trainable)
            self._leaves[key] = node
            return node
        return Node(self, value, trainable=trainable)

    def find_leaf(self, array: np.ndarray) -> Node | None:
        return self._leaves.get(id(array))

    def backward(self, loss: Node) -> None:
        """Populate ``.grad`` on every node contributing to ``loss``.

        Trainable leaves off the path get zero gradients. Deterministic:
        the reverse sweep follows creation order, so identical graphs give
        bit-identical gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss node is not on this tape")
        if loss.value.ndim != 0:
            raise ValueError("backward requires a scalar loss")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes[: loss.index + 1]):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += pg
        for node in self._leaves.values():
            if node.trainable and node.grad is None:
                node.grad = np.zeros_like(node.value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return Tape()


def _pair(x, y) -> tuple[Node, Node]:
    tape = _tape_of(x, y)
    return tape.constant(x), tape.constant(y)


def add(x, y) -> Node:
    x, y = _pair(x, y)
    return Node(
        x.tape,
        x.value + y.value,
        (x, y),
        lambda g: (_unbroadcast(g, x.value.shape), _unbroadcast(g, y.value.shape)),
    )


def sub(x, y) -> Node:
    x, y = _pair(x, y)
    return Node(
        x.tape,
        x.value - y.value,
        (x, y),
        lambda g: (_unbroadcast(g, x.value.shape), _unbroadcast(g, y.value.shape) * -1.0),
    )


def mul(x, y) -> Node:
    x, y = _pair(x, y)
    return Node(
        x.tape,
        x.value * y.value,
        (x, y),
        lambda g: (
            _unbroadcast(g * y.value, x.value.shape),
            _unbroadcast(g * x.value, y.value.shape),
        ),
    )


def div(x, y) -> Node:
    x, y = _pair(x, y)
    return Node(
        x.tape,
        x.value / y.value,
        (x, y),
        lambda g: (
            _unbroadcast(g / y.value, x.value.shape),
            _unbroadcast(-g * x.value / (y.value * y.value), y.value.shape),
        ),
    )


def neg(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    return Node(tape, -x.value, (x,), lambda g: (-g,))


def exp(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    out = np.exp(x.value)
    return Node(tape, out, (x,), lambda g: (g * out,))


def log(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    if np.any(x.value <= 0.0):
        raise DomainError("log of a non-positive value")
    return Node(tape, np.log(x.value), (x,), lambda g: (g / x.value,))


def power(x, exponent: float) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    e = float(exponent)
    out = x.value**e
    return Node(tape, out, (x,), lambda g: (g * e * x.value ** (e - 1.0),))


def matmul(x, y) -> Node:
    """Matrix product with numpy batch broadcasting; operands must be >=2-d."""
    x, y = _pair(x, y)
    if x.value.ndim < 2 or y.value.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = x.value @ y.value

    def vjp(g):
        gx = _unbroadcast(g @ y.value.swapaxes(-1, -2), x.value.shape)
        gy = _unbroadcast(x.value.swapaxes(-1, -2) @ g, y.value.shape)
        return gx, gy

    return Node(x.tape, out, (x, y), vjp)


def softmax(x, axis: int = -1) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Node(tape, out, (x,), vjp)


def softplus(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    v = x.value
    out = np.where(v > 30.0, v, np.log1p(np.exp(np.minimum(v, 30.0))))

    def vjp(g):
        return (g * special.expit(v),)

    return Node(tape, out, (x,), vjp)


def relu(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    mask = x.value > 0.0
    return Node(tape, np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def clamp_min(x, floor: float) -> Node:
    """max(x, floor); gradient passes only where x is strictly above the floor."""
    tape = _tape_of(x)
    x = tape.constant(x)
    mask = x.value > floor
    return Node(tape, np.maximum(x.value, floor), (x,), lambda g: (g * mask,))


def log_gamma(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    if np.any(x.value <= 0.0):
        raise DomainError("log_gamma requires a positive argument")
    return Node(tape, special.gammaln(x.value), (x,), lambda g: (g * special.psi(x.value),))


def digamma(x) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    if np.any(x.value <= 0.0):
        raise DomainError("digamma requires a positive argument")
    return Node(
        tape,
        special.psi(x.value),
        (x,),
        lambda g: (g * special.polygamma(1, x.value),),
    )


def total(x, axis=None, keepdims: bool = False) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return Node(tape, out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return total(x, axis=axis, keepdims=keepdims) / float(count)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("stack needs at least one node")
    tape = _tape_of(*nodes)
    nodes = [tape.constant(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def vjp(g):
        pieces = np.moveaxis(np.asarray(g), axis, 0)
        return tuple(pieces[i] for i in range(len(nodes)))

    return Node(tape, out, tuple(nodes), vjp)


def reshape(x, shape) -> Node:
    tape = _tape_of(x)
    x = tape.constant(x)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    return Node(
        tape,
        x.value.reshape(shape),
        (x,),
        lambda g: (np.asarray(g).reshape(x.value.shape),),
    )


def narrow(x, start: int, stop: int) -> Node:
    """Contiguous slice of a 1-d node."""
    tape = _tape_of(x)
    x = tape.constant(x)
    if x.value.ndim != 1:
        raise ValueError("narrow expects a 1-d node")

    def vjp(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return Node(tape, x.value[start:stop], (x,), vjp)


def check_gradients(f: Callable[[Node], Node], theta, eps: float = 1e-5) -> float:
    """Max relative disagreement between backward and central differences.

    ``f`` must map a 1-d leaf node to a scalar node and be deterministic
    (fix any random noise outside and close over it). Relative error uses
    the denominator max(|analytic|, |numeric|, 1e-8) per component.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    theta = np.asarray(theta, dtype=np.float64).ravel()

    tape = Tape()
    leaf = tape.leaf(theta.copy())
    tape.backward(f(leaf))
    analytic = np.asarray(leaf.grad, dtype=np.float64).ravel()

    def value_at(t: np.ndarray) -> float:
        probe = Tape()
        return float(f(probe.leaf(t)).value)

    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += eps
        plus = value_at(bumped)
        bumped[i] = theta[i] - eps
        minus = value_at(bumped)
        numeric = (plus - minus) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
