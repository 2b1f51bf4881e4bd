"""Scalar reverse-mode automatic differentiation on an explicit tape.

Every arithmetic operation on :class:`ADValue` appends a node to its
:class:`Tape`.  A node stores the float values of its local partial
derivatives (used by the plain reverse sweep) and a lazy builder that
re-expresses those partials as tape operations, which is what makes the
reverse sweep itself differentiable (``create_graph=True``).
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Sequence


class ADError(ValueError):
    """Usage error: foreign leaves, unknown ops, mismatched tapes."""


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, inputs: Sequence[float], value: float):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        super().__init__(f"non-finite result {value!r} from {op}{self.inputs}")


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    partials: tuple[float, ...]
    value: float
    # builds the partials as ADValues on demand (second-order sweeps)
    partial_builder: Callable[[], tuple["ADValue", ...]] | None = None
    aux: float | None = None


class Tape:
    """Append-only record of scalar operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value: float) -> "ADValue":
        return self._push(Node("leaf", (), (), float(value)))

    def constant(self, value: float) -> "ADValue":
        return self._push(Node("const", (), (), float(value)))

    def _push(self, node: Node) -> "ADValue":
        if not math.isfinite(node.value):
            inputs = [self.nodes[p].value for p in node.parents]
            raise NonFiniteError(node.op, inputs, node.value)
        self.nodes.append(node)
        return ADValue(self, len(self.nodes) - 1)

    def record(self, op: str, parents: Sequence["ADValue"], value: float | None = None) -> "ADValue":
        """Record a primitive ``op`` applied to ``parents``.

        ``value`` is recomputed from the parents; passing it only adds a
        consistency check.
        """
        if op not in _PRIMITIVES:
            raise ADError(f"unsupported primitive {op!r}")
        for p in parents:
            if not isinstance(p, ADValue) or p.tape is not self:
                raise ADError("parent is not a value on this tape")
            if not 0 <= p.node_id < len(self.nodes):
                raise ADError(f"invalid node handle {p.node_id}")
        rule, arity = _PRIMITIVES[op]
        if arity != len(parents):
            raise ADError(f"{op} takes {arity} operand(s), got {len(parents)}")
        out = rule(*parents)
        if value is not None and not math.isclose(out.value, value, rel_tol=1e-12, abs_tol=1e-15):
            raise ADError(f"{op}: supplied value {value} disagrees with {out.value}")
        return out

    def replay(self, leaf_values: dict[int, float]) -> list[float]:
        """Re-evaluate every node from new leaf values (same structure)."""
        vals: list[float] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                vals.append(float(leaf_values.get(i, node.value)))
            elif node.op == "const":
                vals.append(node.value)
            else:
                args = [vals[p] for p in node.parents]
                if node.aux is not None:
                    args.append(node.aux)
                vals.append(_EVAL[node.op](*args))
        return vals


class ADValue:
    __slots__ = ("tape", "node_id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> float:
        return self.tape.nodes[self.node_id].value

    def __repr__(self):
        return f"ADValue({self.value!r}, id={self.node_id})"

    def _lift(self, other) -> "ADValue":
        if isinstance(other, ADValue):
            if other.tape is not self.tape:
                raise ADError("operands live on different tapes")
            return other
        return self.tape.constant(float(other))

    def __add__(self, o):
        return add(self, self._lift(o))

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, self._lift(o))

    def __rsub__(self, o):
        return sub(self._lift(o), self)

    def __mul__(self, o):
        return mul(self, self._lift(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, self._lift(o))

    def __rtruediv__(self, o):
        return div(self._lift(o), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if isinstance(p, ADValue):
            raise ADError("only constant exponents are supported")
        return power(self, float(p))

    def tanh(self):
        return tanh(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)


def _node(tape: Tape, op, parents, partials, value, builder=None, aux=None) -> ADValue:
    for d in partials:
        if not math.isfinite(d):
            raise NonFiniteError(op, [p.value for p in parents], d)
    return tape._push(Node(op, tuple(p.node_id for p in parents), tuple(partials), value, builder, aux))


def add(a: ADValue, b: ADValue) -> ADValue:
    t = a.tape
    return _node(t, "add", (a, b), (1.0, 1.0), a.value + b.value,
                 lambda: (t.constant(1.0), t.constant(1.0)))


def sub(a: ADValue, b: ADValue) -> ADValue:
    t = a.tape
    return _node(t, "sub", (a, b), (1.0, -1.0), a.value - b.value,
                 lambda: (t.constant(1.0), t.constant(-1.0)))


def mul(a: ADValue, b: ADValue) -> ADValue:
    return _node(a.tape, "mul", (a, b), (b.value, a.value), a.value * b.value, lambda: (b, a))


def div(a: ADValue, b: ADValue) -> ADValue:
    if b.value == 0.0:
        raise NonFiniteError("div", (a.value, b.value), math.inf)
    inv = 1.0 / b.value
    return _node(a.tape, "div", (a, b), (inv, -a.value * inv * inv), a.value * inv,
                 lambda: (1.0 / b, -a / (b * b)))


def neg(a: ADValue) -> ADValue:
    t = a.tape
    return _node(t, "neg", (a,), (-1.0,), -a.value, lambda: (t.constant(-1.0),))


def tanh(a: ADValue) -> ADValue:
    y = math.tanh(a.value)
    out = None

    def build():
        return (1.0 - out * out,)

    out = _node(a.tape, "tanh", (a,), (1.0 - y * y,), y, build)
    return out


def sin(a: ADValue) -> ADValue:
    return _node(a.tape, "sin", (a,), (math.cos(a.value),), math.sin(a.value), lambda: (cos(a),))


def cos(a: ADValue) -> ADValue:
    return _node(a.tape, "cos", (a,), (-math.sin(a.value),), math.cos(a.value), lambda: (-sin(a),))


def exp(a: ADValue) -> ADValue:
    try:
        y = math.exp(a.value)
    except OverflowError:
        raise NonFiniteError("exp", (a.value,), math.inf) from None
    out = None

    def build():
        return (out,)

    out = _node(a.tape, "exp", (a,), (y,), y, build)
    return out


def relu(a: ADValue) -> ADValue:
    t = a.tape
    slope = 1.0 if a.value > 0.0 else 0.0
    # second derivative is taken as 0 everywhere
    return _node(t, "relu", (a,), (slope,), max(a.value, 0.0), lambda: (t.constant(slope),))


def power(a: ADValue, p: float) -> ADValue:
    try:
        y = a.value ** p
        d = p * a.value ** (p - 1.0) if p != 0.0 else 0.0
    except (ZeroDivisionError, OverflowError):
        raise NonFiniteError("power", (a.value, p), math.inf) from None
    if isinstance(y, complex):
        raise NonFiniteError("power", (a.value, p), math.nan)
    t = a.tape
    if p == 0.0:
        builder = lambda: (t.constant(0.0),)  # noqa: E731
    elif p == 1.0:
        builder = lambda: (t.constant(1.0),)  # noqa: E731
    else:
        builder = lambda: (p * power(a, p - 1.0),)  # noqa: E731
    return _node(t, "power", (a,), (d,), y, builder, aux=p)


_PRIMITIVES: dict[str, tuple[Callable[..., ADValue], int]] = {
    "add": (add, 2),
    "sub": (sub, 2),
    "mul": (mul, 2),
    "div": (div, 2),
    "neg": (neg, 1),
    "tanh": (tanh, 1),
    "sin": (sin, 1),
    "cos": (cos, 1),
    "exp": (exp, 1),
    "relu": (relu, 1),
    # exponent is passed as a constant second operand
    "power": (lambda a, p: power(a, p.value), 2),
}

_EVAL: dict[str, Callable[..., float]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "tanh": math.tanh,
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "relu": lambda a: max(a, 0.0),
    "power": lambda a, p: a ** p,
}


def _check_leaves(output: ADValue, leaves: Sequence[ADValue]):
    for leaf in leaves:
        if not isinstance(leaf, ADValue) or leaf.tape is not output.tape:
            raise ADError("leaf does not belong to the output's tape")


def gradient(output: ADValue, leaves: Sequence[ADValue]) -> list[float]:
    """d(output)/d(leaf) for every leaf, one reverse sweep over the tape."""
    _check_leaves(output, leaves)
    nodes = output.tape.nodes
    adj = [0.0] * (output.node_id + 1)
    adj[output.node_id] = 1.0
    for i in range(output.node_id, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        node = nodes[i]
        for p, d in zip(node.parents, node.partials):
            adj[p] += a * d
    return [adj[leaf.node_id] if leaf.node_id <= output.node_id else 0.0 for leaf in leaves]


def gradient_graph(output: ADValue, leaves: Sequence[ADValue]) -> list[ADValue]:
    """Reverse sweep recorded on the tape, so the result can be differentiated again."""
    _check_leaves(output, leaves)
    tape = output.tape
    end = output.node_id
    adj: dict[int, ADValue] = {end: tape.constant(1.0)}
    for i in range(end, -1, -1):
        a = adj.get(i)
        if a is None:
            continue
        node = tape.nodes[i]
        if not node.parents:
            continue
        partials = node.partial_builder()
        for p, d in zip(node.parents, partials):
            contrib = a * d
            adj[p] = adj[p] + contrib if p in adj else contrib
    zero = None
    out = []
    for leaf in leaves:
        g = adj.get(leaf.node_id)
        if g is None:
            zero = zero or tape.constant(0.0)
            g = zero
        out.append(g)
    return out


def derivative(f: Callable[[list[ADValue]], ADValue], x: Sequence[float]) -> list[float]:
    tape = Tape()
    leaves = [tape.leaf(v) for v in x]
    return gradient(f(leaves), leaves)


def second_derivative(f: Callable[[list[ADValue]], ADValue], x: Sequence[float], i: int, j: int) -> float:
    """d^2 f / dx_i dx_j by differentiating the recorded reverse sweep."""
    tape = Tape()
    leaves = [tape.leaf(v) for v in x]
    y = f(leaves)
    if not isinstance(y, ADValue):
        return 0.0
    first = gradient_graph(y, leaves)
    return gradient(first[i], [leaves[j]])[0]


@dataclass
class FiniteDiffReport:
    autodiff: list[float]
    estimate: list[float]
    rel_err: list[float]

    @property
    def max_rel_err(self) -> float:
        return max(self.rel_err, default=0.0)


def _rel(a: float, b: float, floor: float = 1e-8) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return abs(a - b)
    return abs(a - b) / scale


def finite_diff_check(f: Callable[[list[ADValue]], ADValue], x: Sequence[float],
                      order: int = 1, h: float = 1e-5) -> FiniteDiffReport:
    """Compare autodiff derivatives with central differences.

    ``order=1`` checks the gradient, ``order=2`` the Hessian diagonal.
    Near-zero derivatives are compared in absolute terms.
    """
    if h <= 0:
        raise ADError("h must be positive")
    x = [float(v) for v in x]

    def value(pt):
        tape = Tape()
        y = f([tape.leaf(v) for v in pt])
        return y.value if isinstance(y, ADValue) else float(y)

    auto, est = [], []
    for k in range(len(x)):
        up, dn = list(x), list(x)
        up[k] += h
        dn[k] -= h
        if order == 1:
            est.append((value(up) - value(dn)) / (2.0 * h))
        elif order == 2:
            est.append((value(up) - 2.0 * value(x) + value(dn)) / (h * h))
        else:
            raise ADError("order must be 1 or 2")
    if order == 1:
        tape = Tape()
        leaves = [tape.leaf(v) for v in x]
        y = f(leaves)
        auto = gradient(y, leaves) if isinstance(y, ADValue) else [0.0] * len(x)
    else:
        auto = [second_derivative(f, x, k, k) for k in range(len(x))]
    # below the rounding floor of the difference quotient, compare absolutely
    floor = max(1e-8, 64 * sys.float_info.epsilon * max(abs(value(x)), 1.0) / h ** order)
    return FiniteDiffReport(auto, est, [_rel(a, e, floor) for a, e in zip(auto, est)])
