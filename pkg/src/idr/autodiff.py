"""Reverse-mode automatic differentiation on a recorded tape of dense arrays.

Every operation appends a node to a :class:`Tape`. :func:`backward` sweeps the
tape in reverse. With ``create_graph=True`` the sweep itself records nodes, so
the returned adjoints are ordinary :class:`Var` objects that can be
differentiated again (reverse-over-reverse).

The module-level functions (:func:`exp`, :func:`matmul`, ...) accept either
:class:`Var` or plain arrays. Plain inputs give plain numpy results, which lets
the same model code run with or without a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "AutodiffError",
    "DomainError",
    "StructuralError",
    "Tape",
    "Var",
    "GradMap",
    "backward",
    "grad_of_grad",
    "record",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sin", "cos",
    "sqrt", "tanh", "sigmoid", "softplus", "relu", "absolute", "maximum",
    "minimum", "matmul", "dot", "matvec", "sum", "mean", "reshape",
    "transpose", "concat", "stack", "take", "broadcast_to", "sum_to",
]


class AutodiffError(Exception):
    pass


class DomainError(AutodiffError, ValueError):
    """An operation was applied outside its mathematical domain."""

    def __init__(self, op: str, node: int | None, detail: str):
        where = f"node {node}" if node is not None else "untaped value"
        super().__init__(f"{op} at {where}: {detail}")
        self.op = op
        self.node = node
        self.detail = detail


class StructuralError(AutodiffError):
    """Vars from different tapes were mixed, or a non-scalar was differentiated."""


# ---------------------------------------------------------------------------
# Forward kernels. Each takes numpy arrays (and attrs) and returns an array.
# Domain violations raise DomainError with node=None; Tape.record fills it in.
# ---------------------------------------------------------------------------


def _div_fwd(a, b):
    if np.any(b == 0):
        raise DomainError("div", None, "division by zero")
    return a / b


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError("ln", None, "logarithm of a non-positive value")
    return np.log(a)


def _sqrt_fwd(a):
    if np.any(a < 0):
        raise DomainError("sqrt", None, "square root of a negative value")
    return np.sqrt(a)


def _softplus_fwd(a, beta):
    # max(z, 0) + log1p(exp(-|z|)) is stable and cheaper than logaddexp
    z = np.asarray(a * beta)
    out = np.empty_like(z)
    np.abs(z, out=out)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(z, 0.0)
    out /= beta
    return out


def _sum_to_fwd(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _scatter_fwd(g, index, shape):
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return out


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _div_fwd,
    "neg": np.negative,
    "pow": lambda a, p: np.power(a, p),
    "exp": np.exp,
    "ln": _log_fwd,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": _sqrt_fwd,
    "tanh": np.tanh,
    "sigmoid": expit,
    "softplus": _softplus_fwd,
    "relu": lambda a: np.maximum(a, 0.0),
    "abs": np.abs,
    "max": np.maximum,
    "min": np.minimum,
    "matmul": np.matmul,
    "sum": lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    "reshape": lambda a, shape: np.reshape(a, shape),
    "transpose": lambda a, axes: np.transpose(a, axes),
    "broadcast_to": lambda a, shape: np.broadcast_to(a, shape).copy(),
    "sum_to": _sum_to_fwd,
    "take": lambda a, index: a[index],
    "scatter": _scatter_fwd,
    "concat": _concat_fwd,
    "mulmask": lambda a, mask: a * mask,
}


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Tape, Var, GradMap
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Append-only list of operation records in topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "Var":
        """Register an independent input that gradients can be taken against."""
        self.nodes.append(Node("leaf", (), _as_array(value).copy(), name=name))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        self.nodes.append(Node("const", (), _as_array(value)))
        return Var(self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence[Any], **attrs) -> "Var":
        idx = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise StructuralError(f"{op}: input lives on a different tape")
                idx.append(x.index)
            else:
                idx.append(self.const(x).index)
        values = [self.nodes[i].value for i in idx]
        try:
            value = _FORWARD[op](*values, **attrs)
        except DomainError as exc:
            raise DomainError(exc.op, len(self.nodes), exc.detail) from None
        self.nodes.append(Node(op, tuple(idx), np.asarray(value, dtype=np.float64), attrs))
        return Var(self, len(self.nodes) - 1)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node value from the leaves, optionally substituting some."""
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op in ("leaf", "const"):
                out.append(_as_array(leaf_values.get(i, node.value)))
            else:
                args = [out[j] for j in node.inputs]
                out.append(np.asarray(_FORWARD[node.op](*args, **node.attrs), dtype=np.float64))
        return out


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index} {node.op}, shape={self.shape})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradMap:
    """Adjoints keyed by node; nodes that were never reached have adjoint 0."""

    def __init__(self, adjoints: dict[int, Any], wrt: Sequence[Var]):
        self._adj = adjoints
        self._shapes = {v.index: v.shape for v in wrt}

    def __getitem__(self, var: Var):
        if var.index in self._adj:
            return self._adj[var.index]
        return np.zeros(self._shapes.get(var.index, var.shape))

    def __contains__(self, var: Var) -> bool:
        return var.index in self._adj

    def value(self, var: Var) -> np.ndarray:
        g = self[var]
        return g.value if isinstance(g, Var) else np.asarray(g)

    def __add__(self, other: "GradMap") -> "GradMap":
        adj = dict(self._adj)
        for k, g in other._adj.items():
            adj[k] = adj[k] + g if k in adj else g
        merged = GradMap(adj, [])
        merged._shapes = {**self._shapes, **other._shapes}
        return merged


# ---------------------------------------------------------------------------
# Dispatching operation front-ends
# ---------------------------------------------------------------------------


def _tape_of(args: Iterable[Any]) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise StructuralError("operands live on different tapes")
    return tape


def record(op: str, inputs: Sequence[Any], **attrs):
    """Apply ``op`` to ``inputs``; record it when any input is a Var."""
    tape = _tape_of(inputs)
    if tape is None:
        return np.asarray(_FORWARD[op](*[_as_array(x) for x in inputs], **attrs), dtype=np.float64)
    return tape.record(op, inputs, **attrs)


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, Var) else np.shape(x)


def add(a, b): return record("add", (a, b))
def sub(a, b): return record("sub", (a, b))
def mul(a, b): return record("mul", (a, b))
def div(a, b): return record("div", (a, b))
def neg(a): return record("neg", (a,))
def power(a, p: float): return record("pow", (a,), p=float(p))
def exp(a): return record("exp", (a,))
def log(a): return record("ln", (a,))
def sin(a): return record("sin", (a,))
def cos(a): return record("cos", (a,))
def sqrt(a): return record("sqrt", (a,))
def tanh(a): return record("tanh", (a,))
def sigmoid(a): return record("sigmoid", (a,))
def relu(a): return record("relu", (a,))
def absolute(a): return record("abs", (a,))
def maximum(a, b): return record("max", (a, b))
def minimum(a, b): return record("min", (a, b))
def matmul(a, b): return record("matmul", (a, b))


def softplus(a, beta: float = 100.0):
    """``(1/beta) * ln(1 + exp(beta * a))``."""
    return record("softplus", (a,), beta=float(beta))


def dot(a, b):
    return matmul(a, b)


def matvec(m, v):
    return matmul(m, v)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return record("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    n = np.prod(_shape(a)) if axis is None else _shape(a)[axis]
    return sum(a, axis=axis) * (1.0 / n)


def reshape(a, shape):
    return record("reshape", (a,), shape=tuple(shape))


def transpose(a, axes=None):
    return record("transpose", (a,), axes=None if axes is None else tuple(axes))


def broadcast_to(a, shape):
    return record("broadcast_to", (a,), shape=tuple(shape))


def sum_to(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return record("sum_to", (a,), shape=shape)


def take(a, index):
    return record("take", (a,), index=index)


def _scatter(g, index, shape):
    return record("scatter", (g,), index=index, shape=tuple(shape))


def _mulmask(a, mask):
    return record("mulmask", (a,), mask=mask)


def concat(arrays: Sequence[Any], axis: int = -1):
    return record("concat", tuple(arrays), axis=axis)


def stack(arrays: Sequence[Any], axis: int = -1):
    arrays = list(arrays)
    shp = _shape(arrays[0])
    ax = axis if axis >= 0 else len(shp) + 1 + axis
    new = shp[:ax] + (1,) + shp[ax:]
    return concat([reshape(a, new) for a in arrays], axis=ax)


# ---------------------------------------------------------------------------
# Vector-Jacobian products, written with the dispatching front-ends so they
# record nodes when the adjoint is a Var and stay plain numpy otherwise.
# Signature: vjp(g, inputs, out, needs, **attrs) -> list of adjoints/None.
# ---------------------------------------------------------------------------


def _vjp_add(g, ins, out, needs):
    return [sum_to(g, _shape(ins[0])) if needs[0] else None,
            sum_to(g, _shape(ins[1])) if needs[1] else None]


def _vjp_sub(g, ins, out, needs):
    return [sum_to(g, _shape(ins[0])) if needs[0] else None,
            sum_to(neg(g), _shape(ins[1])) if needs[1] else None]


def _vjp_mul(g, ins, out, needs):
    a, b = ins
    return [sum_to(g * b, _shape(a)) if needs[0] else None,
            sum_to(g * a, _shape(b)) if needs[1] else None]


def _vjp_div(g, ins, out, needs):
    a, b = ins
    ga = sum_to(g / b, _shape(a)) if needs[0] else None
    gb = sum_to(neg(g * out / b), _shape(b)) if needs[1] else None
    return [ga, gb]


def _vjp_pow(g, ins, out, needs, p):
    (a,) = ins
    if p == 0.0:
        return [g * 0.0]
    if p == 1.0:
        return [g]
    return [g * (p * power(a, p - 1.0))]


def _vjp_softplus(g, ins, out, needs, beta):
    return [g * sigmoid(ins[0] * beta)]


def _vjp_sigmoid(g, ins, out, needs):
    return [g * (out * (1.0 - out))]


def _vjp_tanh(g, ins, out, needs):
    return [g * (1.0 - out * out)]


def _vjp_sqrt(g, ins, out, needs):
    return [g * 0.5 / out]


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _vjp_relu(g, ins, out, needs):
    return [_mulmask(g, (_value(ins[0]) > 0).astype(np.float64))]


def _vjp_abs(g, ins, out, needs):
    return [_mulmask(g, np.sign(_value(ins[0])))]


def _vjp_minmax(pick_first: Callable[[np.ndarray, np.ndarray], np.ndarray]):
    def vjp(g, ins, out, needs):
        a, b = ins
        first = np.broadcast_to(pick_first(_value(a), _value(b)), _shape(out)).astype(np.float64)
        ga = sum_to(_mulmask(g, first), _shape(a)) if needs[0] else None
        gb = sum_to(_mulmask(g, 1.0 - first), _shape(b)) if needs[1] else None
        return [ga, gb]
    return vjp


def _outer(a, b):
    return matmul(reshape(a, (-1, 1)), reshape(b, (1, -1)))


def _vjp_matmul(g, ins, out, needs):
    a, b = ins
    na, nb = len(_shape(a)), len(_shape(b))
    if na > 2 or nb > 2:
        raise StructuralError("matmul supports vectors and matrices only")
    ga = gb = None
    if na == 2 and nb == 2:
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
    elif na == 2 and nb == 1:
        ga = _outer(g, b) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
    elif na == 1 and nb == 2:
        ga = matmul(b, g) if needs[0] else None
        gb = _outer(a, g) if needs[1] else None
    else:
        ga = g * b if needs[0] else None
        gb = g * a if needs[1] else None
    return [ga, gb]


def _vjp_sum(g, ins, out, needs, axis, keepdims):
    shp = _shape(ins[0])
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shp) for a in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(shp))
        g = reshape(g, kept)
    return [broadcast_to(g, shp)]


def _vjp_concat(g, ins, out, needs, axis):
    grads = []
    ndim = len(_shape(out))
    ax = axis % ndim
    start = 0
    for x, need in zip(ins, needs):
        n = _shape(x)[ax]
        if need:
            sl = [slice(None)] * ndim
            sl[ax] = slice(start, start + n)
            grads.append(take(g, tuple(sl)))
        else:
            grads.append(None)
        start += n
    return grads


def _inverse_axes(axes, ndim):
    if axes is None:
        return None
    return tuple(np.argsort(axes))


_VJP: dict[str, Callable[..., list]] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, ins, out, needs: [neg(g)],
    "pow": _vjp_pow,
    "exp": lambda g, ins, out, needs: [g * out],
    "ln": lambda g, ins, out, needs: [g / ins[0]],
    "sin": lambda g, ins, out, needs: [g * cos(ins[0])],
    "cos": lambda g, ins, out, needs: [neg(g * sin(ins[0]))],
    "sqrt": _vjp_sqrt,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus,
    "relu": _vjp_relu,
    "abs": _vjp_abs,
    "max": _vjp_minmax(lambda a, b: a >= b),
    "min": _vjp_minmax(lambda a, b: a <= b),
    "matmul": _vjp_matmul,
    "sum": _vjp_sum,
    "reshape": lambda g, ins, out, needs, shape: [reshape(g, _shape(ins[0]))],
    "transpose": lambda g, ins, out, needs, axes: [transpose(g, _inverse_axes(axes, len(_shape(ins[0]))))],
    "broadcast_to": lambda g, ins, out, needs, shape: [sum_to(g, _shape(ins[0]))],
    "sum_to": lambda g, ins, out, needs, shape: [broadcast_to(g, _shape(ins[0]))],
    "take": lambda g, ins, out, needs, index: [_scatter(g, index, _shape(ins[0]))],
    "scatter": lambda g, ins, out, needs, index, shape: [take(g, index)],
    "concat": _vjp_concat,
    "mulmask": lambda g, ins, out, needs, mask: [_mulmask(g, mask)],
}


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------


def backward(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> GradMap:
    """Gradients of the scalar ``output`` with respect to each node in ``wrt``.

    ``wrt`` may name interior nodes; the sweep then treats them as independent
    inputs and does not propagate past them. With ``create_graph`` the
    adjoints are recorded on the tape and can be differentiated again.
    """
    if not isinstance(output, Var):
        raise StructuralError("output must be a Var")
    if output.value.size != 1:
        raise StructuralError(f"output must be scalar, got shape {output.shape}")
    tape = output.tape
    wrt = list(wrt)
    for v in wrt:
        if v.tape is not tape:
            raise StructuralError("leaf and output live on different tapes")
    if not wrt:
        return GradMap({}, wrt)

    targets = {v.index for v in wrt}
    lo = min(targets)
    hi = output.index
    nodes = tape.nodes

    # nodes in [lo, hi] that depend on any target
    dep = {}
    for i in range(lo, hi + 1):
        if i in targets:
            dep[i] = True
        else:
            dep[i] = any(dep.get(j, False) for j in nodes[i].inputs)
    if not dep.get(hi, False):
        return GradMap({}, wrt)

    seed = np.ones_like(output.value)
    adj: dict[int, Any] = {hi: tape.const(seed) if create_graph else seed}
    for i in range(hi, lo - 1, -1):
        g = adj.get(i)
        if g is None or i in targets:
            continue
        node = nodes[i]
        if node.op in ("leaf", "const"):
            continue
        needs = [dep.get(j, False) for j in node.inputs]
        if not any(needs):
            continue
        if create_graph:
            ins = [Var(tape, j) for j in node.inputs]
            out = Var(tape, i)
        else:
            ins = [nodes[j].value for j in node.inputs]
            out = node.value
        grads = _VJP[node.op](g, ins, out, needs, **node.attrs)
        for j, need, gj in zip(node.inputs, needs, grads):
            if not need or gj is None:
                continue
            adj[j] = adj[j] + gj if j in adj else gj
        del adj[i]
    return GradMap({k: adj[k] for k in targets if k in adj}, wrt)


def grad_of_grad(output: Var, inner: Sequence[Var], outer: Sequence[Var],
                 direction: Sequence[Any] | None = None) -> GradMap:
    """Gradient w.r.t. ``outer`` of ``sum_i <direction_i, d output / d inner_i>``.

    With the default all-ones direction and scalar inner leaves this is the
    mixed second derivative; in general it is a Hessian-vector product.
    """
    inner = list(inner)
    first = backward(output, inner, create_graph=True)
    total = None
    for k, v in enumerate(inner):
        g = first[v]
        if not isinstance(g, Var):
            continue
        d = np.ones(v.shape) if direction is None else direction[k]
        term = sum(g * d)
        total = term if total is None else total + term
    if total is None:
        return GradMap({}, list(outer))
    return backward(total, list(outer))
