"""Reverse-mode autodiff over float64 arrays, with a forward-mode layer on top.

The engine records a computation graph of ``Node`` objects. A node's value is
a numpy float64 array: a scalar, a vector, or a batch of rows, so one graph
evaluates a whole minibatch at once. ``reverse_grad`` runs a single backward
sweep in reverse insertion order, which makes gradient accumulation
deterministic and runs bit-identical across repeats.

``DualNode`` carries a (primal, tangent) pair whose tangent components are
ordinary graph nodes. Directional derivatives built this way remain
differentiable, so reverse-mode can be applied on top of them. That
second-order capability is what lets an exact velocity divergence sit inside
a training loss.

Supported primitives: add, sub, mul, div, neg, exp, log, sigmoid, silu,
dsilu (derivative of silu, needed by tangent rules), sum, dot, affine
(fused dot + bias add) and with_time (prepend a constant column). Shapes
follow numpy broadcasting for elementwise ops; backward un-broadcasts by
summing.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """An argument violates an operation's contract (shape, domain, range)."""


class GraphCorruptionError(RuntimeError):
    """The graph is no longer a DAG (a cycle was detected)."""


class NumericError(RuntimeError):
    """A non-finite value appeared; carries the op tag that produced it."""

    def __init__(self, message: str, op: str = ""):
        super().__init__(message)
        self.op = op


_ids = itertools.count()


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _require_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by op '{op}'", op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    """One value in the computation graph.

    parents is a tuple of (parent, vjp) pairs where vjp maps this node's
    adjoint to the parent's adjoint contribution (already un-broadcast).
    """

    __slots__ = ("value", "parents", "op", "id")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = _as_value(value)
        self.parents = parents
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # Arithmetic builds graph nodes; plain numbers/arrays become constants.
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return dot(self, _coerce(other))


def leaf(value) -> Node:
    """A graph input. Gradients may be requested with respect to leaves."""
    node = Node(value)
    _require_finite(node.value, "leaf")
    return node


def constant(value) -> Node:
    """A fixed value participating in the graph without gradient interest."""
    node = Node(value, op="const")
    _require_finite(node.value, "const")
    return node


def _coerce(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Node, b: Node) -> Node:
    return Node(
        a.value + b.value,
        (
            (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
            (b, lambda g, s=b.value.shape: _unbroadcast(g, s)),
        ),
        op="add",
    )


def sub(a: Node, b: Node) -> Node:
    return Node(
        a.value - b.value,
        (
            (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
            (b, lambda g, s=b.value.shape: _unbroadcast(-g, s)),
        ),
        op="sub",
    )


def mul(a: Node, b: Node) -> Node:
    return Node(
        a.value * b.value,
        (
            (a, lambda g, o=b.value, s=a.value.shape: _unbroadcast(g * o, s)),
            (b, lambda g, o=a.value, s=b.value.shape: _unbroadcast(g * o, s)),
        ),
        op="mul",
    )


def div(a: Node, b: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    _require_finite(value, "div")
    return Node(
        value,
        (
            (a, lambda g, d=b.value, s=a.value.shape: _unbroadcast(g / d, s)),
            (
                b,
                lambda g, n=a.value, d=b.value, s=b.value.shape: _unbroadcast(
                    -g * n / (d * d), s
                ),
            ),
        ),
        op="div",
    )


def neg(a: Node) -> Node:
    return Node(-a.value, ((a, lambda g: -g),), op="neg")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    _require_finite(value, "exp")
    return Node(value, ((a, lambda g, v=value: g * v),), op="exp")


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    _require_finite(value, "log")
    return Node(value, ((a, lambda g, x=a.value: g / x),), op="log")


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    # Direct logistic form. exp may overflow for very negative x; the
    # quotient still lands on the correct limit (1/inf = 0), so the
    # overflow flag is suppressed rather than avoided. In-place steps keep
    # the training hot path down to one temporary.
    with np.errstate(over="ignore"):
        e = np.exp(-x)
    if isinstance(e, np.ndarray) and e.ndim:
        e += 1.0
        np.divide(1.0, e, out=e)
        return e
    return 1.0 / (1.0 + e)


def sigmoid(a: Node) -> Node:
    s = _sigmoid_value(a.value)
    return Node(s, ((a, lambda g, s=s: g * s * (1.0 - s)),), op="sigmoid")


def silu_pair(a: Node) -> tuple[Node, Node]:
    """(silu(x), silu'(x)) sharing one sigmoid evaluation.

    The value node's backward reuses the precomputed derivative array; the
    derivative node's backward applies silu''(x) = s(1-s)(2 + x(1-2s)).
    The derivative must be a first-class node so directional derivatives
    built from it stay differentiable.
    """
    x = a.value
    s = _sigmoid_value(x)
    deriv = 1.0 - s
    deriv *= x
    deriv += 1.0
    deriv *= s
    value_node = Node(x * s, ((a, lambda g, d=deriv: g * d),), op="silu")
    deriv_node = Node(
        deriv, ((a, lambda g, x=x, s=s: _silu_curvature(x, s, g)),), op="dsilu"
    )
    return value_node, deriv_node


def _silu_curvature(x: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    # g * silu''(x) with silu''(x) = s(1-s)(2 + x(1-2s))
    u = 1.0 - 2.0 * s
    u *= x
    u += 2.0
    u *= s
    u *= 1.0 - s
    u *= g
    return u


def silu(a: Node) -> Node:
    """x * sigmoid(x)."""
    x = a.value
    s = _sigmoid_value(x)
    deriv = s * (1.0 + x * (1.0 - s))
    return Node(x * s, ((a, lambda g, d=deriv: g * d),), op="silu")


def dsilu(a: Node) -> Node:
    """silu'(x) as a graph value; backward uses silu''(x)."""
    return silu_pair(a)[1]


def node_sum(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g, shape=a.value.shape, axis=axis, keepdims=keepdims):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Node(value, ((a, back),), op="sum")


# ---------------------------------------------------------------------------
# contractions


def dot(a: Node, b: Node) -> Node:
    """Matrix/vector product with numpy @ semantics for 1-d and 2-d operands."""
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ContractError(f"dot expects 1-d or 2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ContractError(f"dot dimension mismatch: {av.shape} @ {bv.shape}")
    value = av @ bv

    if av.ndim == 1 and bv.ndim == 1:
        backs = (
            (a, lambda g, o=bv: g * o),
            (b, lambda g, o=av: g * o),
        )
    elif av.ndim == 2 and bv.ndim == 2:
        backs = (
            (a, lambda g, o=bv: g @ o.T),
            (b, lambda g, o=av: o.T @ g),
        )
    elif av.ndim == 1 and bv.ndim == 2:
        backs = (
            (a, lambda g, o=bv: g @ o.T),
            (b, lambda g, o=av: np.outer(o, g)),
        )
    else:  # (B, n) @ (n,)
        backs = (
            (a, lambda g, o=bv: np.outer(g, o)),
            (b, lambda g, o=av: o.T @ g),
        )
    return Node(value, backs, op="dot")


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b in one node (the linear-layer workhorse)."""
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[0]:
        raise ContractError(f"affine shape mismatch: {xv.shape} @ {wv.shape}")
    if b.value.shape != (wv.shape[1],):
        raise ContractError(f"affine bias shape {b.value.shape} != ({wv.shape[1]},)")
    value = xv @ wv
    value += b.value
    if xv.ndim == 2:
        backs = (
            (x, lambda g, o=wv: g @ o.T),
            (w, lambda g, o=xv: o.T @ g),
            (b, lambda g: g.sum(axis=0)),
        )
    else:
        backs = (
            (x, lambda g, o=wv: g @ o.T),
            (w, lambda g, o=xv: np.outer(o, g)),
            (b, lambda g: g),
        )
    return Node(value, backs, op="affine")


def with_time(t: float, x: Node) -> Node:
    """Prepend a constant column (the stage time) to x."""
    xv = x.value
    if xv.ndim == 1:
        value = np.concatenate([[t], xv])
        back = (x, lambda g: g[1:])
    elif xv.ndim == 2:
        col = np.full((xv.shape[0], 1), t)
        value = np.concatenate([col, xv], axis=1)
        back = (x, lambda g: g[:, 1:])
    else:
        raise ContractError(f"with_time expects 1-d or 2-d x, got shape {xv.shape}")
    return Node(value, (back,), op="with_time")


# ---------------------------------------------------------------------------
# backward sweep


def _topo_order(output: Node) -> list[Node]:
    """Ancestors of output in insertion order; raises on cycles."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[int, int] = {}
    order: list[Node] = []
    stack: list[tuple[Node, int]] = [(output, 0)]
    color[output.id] = GRAY
    while stack:
        node, i = stack.pop()
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i][0]
            state = color.get(parent.id, WHITE)
            if state == GRAY:
                raise GraphCorruptionError(
                    f"cycle detected through op '{parent.op}'"
                )
            if state == WHITE:
                color[parent.id] = GRAY
                stack.append((parent, 0))
        else:
            color[node.id] = BLACK
            order.append(node)
    order.sort(key=lambda n: n.id)
    return order


def reverse_grad(output: Node, leaves: Sequence[Node]) -> list[np.ndarray]:
    """Gradient of a scalar output with respect to each leaf.

    One backward sweep in reverse insertion order. Leaves outside the
    output's ancestry get zero gradients.
    """
    if output.value.ndim != 0:
        raise ContractError("reverse_grad output must be scalar")
    if not np.isfinite(output.value):
        raise NumericError(
            f"non-finite output value from op '{output.op}'", op=output.op
        )
    order = _topo_order(output)
    wanted = {node.id for node in leaves}
    # adjoint holds [array, owned]; in-place accumulation is only allowed on
    # arrays this sweep allocated itself, since vjp outputs may alias their
    # input adjoints (identity and view backward rules).
    adjoint: dict[int, list] = {output.id: [np.ones(()), True]}
    for node in reversed(order):
        entry = adjoint.get(node.id)
        if entry is None:
            continue
        g = entry[0]
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = adjoint.get(parent.id)
            if prev is None:
                adjoint[parent.id] = [contrib, False]
            elif (
                prev[1]
                and isinstance(prev[0], np.ndarray)
                and prev[0].ndim > 0
                and prev[0].shape == np.shape(contrib)
            ):
                np.add(prev[0], contrib, out=prev[0])
            else:
                adjoint[parent.id] = [prev[0] + contrib, True]
        if node.id not in wanted:
            del adjoint[node.id]
    grads = []
    for node in leaves:
        entry = adjoint.get(node.id)
        if entry is None:
            g = np.zeros(node.value.shape)
        else:
            g = np.asarray(entry[0], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient for leaf created as '{node.op}'",
                    op=node.op,
                )
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# forward mode over the graph


class DualNode:
    """(primal, tangent) pair; the tangent is itself a graph node.

    Arithmetic follows the product/chain rules, with both components built
    from the same primitives, so results of forward mode stay differentiable
    by reverse_grad.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Node, tangent: Node):
        if primal.value.shape != tangent.value.shape:
            raise ContractError(
                f"dual shape mismatch: {primal.value.shape} vs {tangent.value.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @staticmethod
    def lift(x) -> "DualNode":
        node = _coerce(x)
        return DualNode(node, constant(np.zeros(node.value.shape)))

    def __add__(self, other):
        o = other if isinstance(other, DualNode) else DualNode.lift(other)
        return DualNode(add(self.primal, o.primal), add(self.tangent, o.tangent))

    __radd__ = __add__

    def __sub__(self, other):
        o = other if isinstance(other, DualNode) else DualNode.lift(other)
        return DualNode(sub(self.primal, o.primal), sub(self.tangent, o.tangent))

    def __rsub__(self, other):
        return DualNode.lift(other).__sub__(self)

    def __mul__(self, other):
        o = other if isinstance(other, DualNode) else DualNode.lift(other)
        return DualNode(
            mul(self.primal, o.primal),
            add(mul(self.tangent, o.primal), mul(self.primal, o.tangent)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = other if isinstance(other, DualNode) else DualNode.lift(other)
        quotient = div(self.primal, o.primal)
        return DualNode(
            quotient,
            div(sub(self.tangent, mul(quotient, o.tangent)), o.primal),
        )

    def __rtruediv__(self, other):
        return DualNode.lift(other).__truediv__(self)

    def __neg__(self):
        return DualNode(neg(self.primal), neg(self.tangent))


def dual_exp(u: DualNode) -> DualNode:
    e = exp(u.primal)
    return DualNode(e, mul(e, u.tangent))


def dual_log(u: DualNode) -> DualNode:
    return DualNode(log(u.primal), div(u.tangent, u.primal))


def dual_sigmoid(u: DualNode) -> DualNode:
    s = sigmoid(u.primal)
    return DualNode(s, mul(mul(s, sub(constant(1.0), s)), u.tangent))


def dual_silu(u: DualNode) -> DualNode:
    value, deriv = silu_pair(u.primal)
    return DualNode(value, mul(deriv, u.tangent))


def dual_sum(u: DualNode, axis: int | None = None, keepdims: bool = False) -> DualNode:
    return DualNode(
        node_sum(u.primal, axis, keepdims), node_sum(u.tangent, axis, keepdims)
    )


def dual_dot(u: DualNode, other: Node) -> DualNode:
    """u @ other where other carries no tangent (e.g. a weight matrix)."""
    return DualNode(dot(u.primal, other), dot(u.tangent, other))


def dual_affine(u: DualNode, w: Node, b: Node) -> DualNode:
    """u @ w + b; the bias drops out of the tangent."""
    return DualNode(affine(u.primal, w, b), dot(u.tangent, w))


def dual_with_time(t: float, u: DualNode) -> DualNode:
    return DualNode(with_time(t, u.primal), with_time(0.0, u.tangent))


def jvp(f: Callable[[DualNode], object], x, direction) -> Node:
    """Directional derivative of f at x along direction, as a graph node.

    x may be an existing leaf Node, in which case reverse_grad may be
    applied to the returned tangent with respect to that leaf (second-order
    derivatives).
    """
    x_node = x if isinstance(x, Node) else leaf(_as_value(x))
    d = _as_value(direction)
    if d.shape != x_node.value.shape:
        raise ContractError(
            f"direction shape {d.shape} does not match point shape {x_node.value.shape}"
        )
    out = f(DualNode(x_node, constant(d)))
    if isinstance(out, DualNode):
        return out.tangent
    # f ignored its argument: derivative is zero
    out = _coerce(out)
    return constant(np.zeros(out.value.shape))


def check_grad_fd(f: Callable[[Node], Node], x, h: float) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Error per coordinate is |grad - fd| / (|fd| + 1e-12).
    """
    x = _as_value(x)
    point = leaf(x)
    out = f(point)
    if out.value.ndim != 0:
        raise ContractError("check_grad_fd expects a scalar-valued function")
    grad = reverse_grad(out, [point])[0]
    worst = 0.0
    for j in range(x.size):
        step = np.zeros(x.shape)
        step.flat[j] = h
        f_plus = f(constant(x + step)).value
        f_minus = f(constant(x - step)).value
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("non-finite function value in finite difference")
        fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(float(grad.flat[j]) - float(fd)) / (abs(float(fd)) + 1e-12))
    return worst


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """A flat float64 array with named, disjoint, covering slices.

    The optimizer works on the flat array; graph construction views each
    slice under its layout shape.
    """

    def __init__(self, entries: Iterable[tuple[str, tuple[int, ...]]]):
        self.layout: list[tuple[str, int, tuple[int, ...]]] = []
        offset = 0
        seen = set()
        for name, shape in entries:
            if name in seen:
                raise ContractError(f"duplicate parameter name '{name}'")
            seen.add(name)
            size = int(np.prod(shape)) if shape else 1
            if size <= 0:
                raise ContractError(f"parameter '{name}' has empty shape {shape}")
            self.layout.append((name, offset, tuple(shape)))
            offset += size
        self.flat = np.zeros(offset)
        self._index = {name: (off, shape) for name, off, shape in self.layout}

    def __len__(self):
        return self.flat.size

    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def view(self, name: str) -> np.ndarray:
        """Writable view of one slice under its layout shape."""
        offset, shape = self._index[name]
        size = int(np.prod(shape))
        return self.flat[offset : offset + size].reshape(shape)

    def leaf_nodes(self) -> dict[str, Node]:
        """Fresh leaf nodes over the current parameter values, one per slice."""
        return {name: leaf(self.view(name)) for name, _, _ in self.layout}

    def flatten(self, per_name: dict[str, np.ndarray]) -> np.ndarray:
        """Pack per-slice arrays (e.g. gradients) into flat layout order."""
        parts = []
        for name, _, shape in self.layout:
            arr = np.asarray(per_name[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(
                    f"slice '{name}' has shape {arr.shape}, layout says {shape}"
                )
            parts.append(arr.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_flat(self, values: np.ndarray) -> None:
        values = _as_value(values)
        if values.shape != self.flat.shape:
            raise ContractError(
                f"flat length {values.shape} does not match store length {self.flat.shape}"
            )
        self.flat[:] = values
