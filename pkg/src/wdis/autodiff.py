"""Minimal reverse-mode differentiation on a tape of dense 2-D float64 arrays.

Every value is a 2-D array; scalars are ``(1, 1)``. The primitive set is closed
(see ``PRIMITIVES``) and there is no implicit broadcasting. Biases are added by
an explicit ``ones(n, 1) @ b`` product.

Backward passes can themselves be recorded on the tape (``create_graph=True``),
which is what the gradient penalty needs: the input-gradient of a critic is a
graph in the critic parameters, and that graph is differentiated again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Var",
    "Tape",
    "PRIMITIVES",
    "grad",
    "input_gradient",
    "grad_of_gradnorm",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached the tape."""


def _as_2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"only 2-D arrays are supported, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in {what}")


# --------------------------------------------------------------------------
# forward rules


def _fwd_add(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def _fwd_subtract(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape} differ")
    return a - b


def _fwd_multiply(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    return a * b


def _fwd_scale(vals, attrs):
    return vals[0] * attrs["c"]


def _fwd_matmul(vals, attrs):
    a, b = vals
    a = a.T if attrs["ta"] else a
    b = b.T if attrs["tb"] else b
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def _fwd_concat(vals, attrs):
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=1)


def _fwd_slice(vals, attrs):
    a = vals[0]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice: [{start}:{stop}) out of range for shape {a.shape}")
    return a[:, start:stop]


def _fwd_leaky_relu(vals, attrs):
    a = vals[0]
    # max(a, slope*a) equals the piecewise definition for slope in (0, 1)
    return np.maximum(a, attrs["slope"] * a)


def _fwd_mean(vals, attrs):
    return np.full((1, 1), vals[0].mean())


def _fwd_sum(vals, attrs):
    return np.full((1, 1), vals[0].sum())


def _fwd_l2_norm(vals, attrs):
    a = vals[0]
    return np.sqrt(np.einsum("ij,ij->i", a, a)).reshape(-1, 1)


def _fwd_square(vals, attrs):
    return vals[0] * vals[0]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _fwd_softmax_ce(vals, attrs):
    logits, targets = vals
    if logits.shape != targets.shape:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    if logits.shape[0] == 0:
        return np.zeros((1, 1))
    return np.full((1, 1), -(targets * _log_softmax(logits)).sum() / logits.shape[0])


# --------------------------------------------------------------------------
# vector-Jacobian rules
#
# Each rule receives an ops backend ``F`` (plain numpy or tape-recording), the
# output adjoint ``g``, the input operands and output in that backend's
# representation, the raw numpy input values, and the attrs. It returns one
# adjoint per input (None where the input takes no gradient).


def _vjp_add(F, g, ins, out, raw, attrs):
    return g, g


def _vjp_subtract(F, g, ins, out, raw, attrs):
    return g, F.scale(g, -1.0)


def _vjp_multiply(F, g, ins, out, raw, attrs):
    a, b = ins
    return F.multiply(g, b), F.multiply(g, a)


def _vjp_scale(F, g, ins, out, raw, attrs):
    return (F.scale(g, attrs["c"]),)


def _vjp_matmul(F, g, ins, out, raw, attrs):
    a, b = ins
    ta, tb = attrs["ta"], attrs["tb"]
    if not ta and not tb:
        return F.matmul(g, b, tb=True), F.matmul(a, g, ta=True)
    if ta and not tb:
        return F.matmul(b, g, tb=True), F.matmul(a, g)
    if not ta and tb:
        return F.matmul(g, b), F.matmul(g, a, ta=True)
    return F.matmul(b, g, ta=True, tb=True), F.matmul(g, a, ta=True, tb=True)


def _vjp_concat(F, g, ins, out, raw, attrs):
    grads = []
    start = 0
    for v in raw:
        stop = start + v.shape[1]
        grads.append(F.slice(g, start, stop))
        start = stop
    return tuple(grads)


def _vjp_slice(F, g, ins, out, raw, attrs):
    n, width = raw[0].shape
    start, stop = attrs["start"], attrs["stop"]
    parts = []
    if start > 0:
        parts.append(F.const(np.zeros((n, start))))
    parts.append(g)
    if stop < width:
        parts.append(F.const(np.zeros((n, width - stop))))
    return (parts[0] if len(parts) == 1 else F.concat(parts),)


def _vjp_leaky_relu(F, g, ins, out, raw, attrs):
    # kink at 0 takes the positive-side slope
    mask = np.maximum(raw[0] >= 0.0, attrs["slope"])
    return (F.multiply(g, F.const(mask)),)


def _broadcast_scalar(F, g, shape):
    rows, cols = shape
    return F.matmul(F.matmul(F.const(np.ones((rows, 1))), g), F.const(np.ones((1, cols))))


def _vjp_sum(F, g, ins, out, raw, attrs):
    return (_broadcast_scalar(F, g, raw[0].shape),)


def _vjp_mean(F, g, ins, out, raw, attrs):
    size = raw[0].size
    return (F.scale(_broadcast_scalar(F, g, raw[0].shape), 1.0 / size),)


def _vjp_square(F, g, ins, out, raw, attrs):
    return (F.multiply(g, F.scale(ins[0], 2.0)),)


def _vjp_l2_norm(F, g, ins, out, raw, attrs):
    if F.records:
        raise NotImplementedError("l2_norm is differentiable once only")
    a = raw[0]
    norms = out
    safe = np.where(norms > 0.0, norms, 1.0)
    coeff = np.where(norms > 0.0, g / safe, 0.0)
    return (a * coeff,)


def _vjp_softmax_ce(F, g, ins, out, raw, attrs):
    if F.records:
        raise NotImplementedError("softmax_cross_entropy is differentiable once only")
    logits, targets = raw
    n = logits.shape[0]
    if n == 0:
        return np.zeros_like(logits), None
    probs = np.exp(_log_softmax(logits))
    return (probs - targets) * (g[0, 0] / n), None


@dataclass(frozen=True)
class _Primitive:
    forward: Callable[[Sequence[np.ndarray], dict], np.ndarray]
    vjp: Callable[..., tuple]
    arity: int | None  # None means variadic


PRIMITIVES: dict[str, _Primitive] = {
    "add": _Primitive(_fwd_add, _vjp_add, 2),
    "subtract": _Primitive(_fwd_subtract, _vjp_subtract, 2),
    "multiply": _Primitive(_fwd_multiply, _vjp_multiply, 2),
    "scale": _Primitive(_fwd_scale, _vjp_scale, 1),
    "matmul": _Primitive(_fwd_matmul, _vjp_matmul, 2),
    "concat": _Primitive(_fwd_concat, _vjp_concat, None),
    "slice": _Primitive(_fwd_slice, _vjp_slice, 1),
    "leaky_relu": _Primitive(_fwd_leaky_relu, _vjp_leaky_relu, 1),
    "mean": _Primitive(_fwd_mean, _vjp_mean, 1),
    "sum": _Primitive(_fwd_sum, _vjp_sum, 1),
    "l2_norm": _Primitive(_fwd_l2_norm, _vjp_l2_norm, 1),
    "square": _Primitive(_fwd_square, _vjp_square, 1),
    "softmax_cross_entropy": _Primitive(_fwd_softmax_ce, _vjp_softmax_ce, 2),
}


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str  # primitive name, or "param" / "input" / "const" for leaves
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool
    name: str | None = None


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.apply("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.apply("subtract", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.apply("subtract", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", [self], c=float(other))
        return self.tape.apply("multiply", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.apply("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", [self, self._lift(other)], ta=False, tb=False)

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", [self._lift(other), self], ta=False, tb=False)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, op={node.op}, shape={node.value.shape})"


class Tape:
    """Append-only record of primitive applications.

    Leaves are created with :meth:`param` (trainable), :meth:`input`
    (differentiable but not a parameter, e.g. a gradient-penalty interpolate)
    or :meth:`constant`. Only leaves created by the first two take gradients.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self.zero_norm_events = 0

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, kind, value, requires_grad, name=None) -> Var:
        arr = _as_2d(value)
        if self.check_finite:
            _check_finite(arr, f"{kind} leaf {name or len(self.nodes)}")
        self.nodes.append(_Node(kind, (), {}, arr, requires_grad, name))
        return Var(self, len(self.nodes) - 1)

    def param(self, value, name: str | None = None) -> Var:
        return self._leaf("param", value, True, name)

    def input(self, value, name: str | None = None) -> Var:
        return self._leaf("input", value, True, name)

    def constant(self, value, name: str | None = None) -> Var:
        return self._leaf("const", value, False, name)

    def apply(self, op: str, inputs: Sequence[Var], **attrs) -> Var:
        """Run a primitive forward and append exactly one node."""
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise KeyError(f"unknown primitive {op!r}")
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ShapeError(f"{op} takes {prim.arity} inputs, got {len(inputs)}")
        if op == "leaky_relu" and not 0.0 < attrs.get("slope", -1.0) < 1.0:
            raise ValueError("leaky_relu slope must lie in (0, 1)")
        for v in inputs:
            if v.tape is not self:
                raise ValueError("operand belongs to a different tape")
        nodes = self.nodes
        vals = [nodes[v.index].value for v in inputs]
        out = prim.forward(vals, attrs)
        if self.check_finite:
            _check_finite(out, f"output of {op}")
        if op == "l2_norm":
            self.zero_norm_events += int(np.count_nonzero(out == 0.0))
        requires = any(nodes[v.index].requires_grad for v in inputs)
        nodes.append(_Node(op, tuple(v.index for v in inputs), attrs, out, requires))
        return Var(self, len(nodes) - 1)

    # thin conveniences so model code reads naturally
    def matmul(self, a: Var, b: Var, ta: bool = False, tb: bool = False) -> Var:
        return self.apply("matmul", [a, b], ta=ta, tb=tb)

    def concat(self, parts: Sequence[Var]) -> Var:
        return self.apply("concat", list(parts))

    def slice(self, a: Var, start: int, stop: int) -> Var:
        return self.apply("slice", [a], start=start, stop=stop)

    def leaky_relu(self, a: Var, slope: float) -> Var:
        return self.apply("leaky_relu", [a], slope=slope)

    def mean(self, a: Var) -> Var:
        return self.apply("mean", [a])

    def sum(self, a: Var) -> Var:
        return self.apply("sum", [a])

    def l2_norm(self, a: Var) -> Var:
        return self.apply("l2_norm", [a])

    def square(self, a: Var) -> Var:
        return self.apply("square", [a])

    def softmax_cross_entropy(self, logits: Var, targets: Var) -> Var:
        return self.apply("softmax_cross_entropy", [logits, targets])

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node's value from the leaves (optionally overridden)."""
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if not node.inputs and node.op in ("param", "input", "const"):
                values.append(_as_2d(leaf_values.get(i, node.value)))
            else:
                prim = PRIMITIVES[node.op]
                values.append(prim.forward([values[j] for j in node.inputs], node.attrs))
        return values


# --------------------------------------------------------------------------
# backends used by the vjp rules


class _NumpyOps:
    records = False

    @staticmethod
    def const(x):
        return x

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def multiply(a, b):
        return a * b

    @staticmethod
    def scale(a, c):
        return a * c

    @staticmethod
    def matmul(a, b, ta=False, tb=False):
        return (a.T if ta else a) @ (b.T if tb else b)

    @staticmethod
    def concat(parts):
        return np.concatenate(parts, axis=1)

    @staticmethod
    def slice(a, start, stop):
        return a[:, start:stop]


class _GraphOps:
    records = True

    def __init__(self, tape: Tape):
        self.tape = tape

    def const(self, x):
        return self.tape.constant(x)

    def add(self, a, b):
        return self.tape.apply("add", [a, b])

    def multiply(self, a, b):
        return self.tape.apply("multiply", [a, b])

    def scale(self, a, c):
        return self.tape.apply("scale", [a], c=c)

    def matmul(self, a, b, ta=False, tb=False):
        return self.tape.apply("matmul", [a, b], ta=ta, tb=tb)

    def concat(self, parts):
        return self.tape.apply("concat", list(parts))

    def slice(self, a, start, stop):
        return self.tape.apply("slice", [a], start=start, stop=stop)


def grad(
    tape: Tape,
    output: Var,
    wrt: Iterable[Var],
    create_graph: bool = False,
) -> list[Any]:
    """Reverse-mode gradient of a scalar ``output`` with respect to ``wrt`` leaves.

    With ``create_graph`` the adjoint computation is itself recorded on the tape
    and the returned gradients are :class:`Var` nodes that can be differentiated
    again. Leaves not reached by ``output`` get zero gradients.
    """
    wrt = list(wrt)
    if output.shape != (1, 1):
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    nodes = tape.nodes
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("wrt leaf belongs to a different tape")
        if nodes[w.index].op not in ("param", "input"):
            raise ValueError(f"{w!r} is not a differentiable leaf")

    F = _GraphOps(tape) if create_graph else _NumpyOps
    end = output.index
    adjoint: dict[int, Any] = {end: F.const(np.ones((1, 1)))}

    # only visit nodes on a path from some wrt leaf to the output
    targets = {w.index for w in wrt}
    relevant = [False] * (end + 1)
    for i in range(end + 1):
        node = nodes[i]
        if i in targets:
            relevant[i] = True
        elif node.inputs and node.requires_grad:
            relevant[i] = any(relevant[j] for j in node.inputs)

    for i in range(end, -1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if not node.inputs:
            adjoint[i] = g  # leaf: keep it
            continue
        prim = PRIMITIVES[node.op]
        raw = [nodes[j].value for j in node.inputs]
        if create_graph:
            ins = [Var(tape, j) for j in node.inputs]
            out = Var(tape, i)
        else:
            ins, out = raw, node.value
        in_grads = prim.vjp(F, g, ins, out, raw, node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None or not relevant[j]:
                continue
            prev = adjoint.get(j)
            adjoint[j] = gj if prev is None else F.add(prev, gj)

    result = []
    for w in wrt:
        g = adjoint.get(w.index)
        if g is None:
            zeros = np.zeros_like(nodes[w.index].value)
            g = tape.constant(zeros) if create_graph else zeros
        result.append(g)
    return result


def input_gradient(tape: Tape, output: Var, input_leaf: Var) -> Var:
    """Differentiable gradient of ``sum(output)`` with respect to ``input_leaf``.

    For a row-wise network, row ``i`` of the result is the gradient of output
    row ``i`` with respect to input row ``i``.
    """
    total = output if output.shape == (1, 1) else tape.sum(output)
    (g,) = grad(tape, total, [input_leaf], create_graph=True)
    return g


@dataclass
class GradNormResult:
    grads: list[np.ndarray]
    norms: np.ndarray
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def grad_of_gradnorm(
    tape: Tape, critic_output: Var, input_leaf: Var, params: Sequence[Var]
) -> GradNormResult:
    """Parameter derivative of the summed row norms of the critic's input-gradient.

    Rows whose input-gradient is exactly zero are flagged; they contribute the
    subgradient 0.
    """
    g = input_gradient(tape, critic_output, input_leaf)
    norms = tape.l2_norm(g)
    total = tape.sum(norms)
    grads = grad(tape, total, params)
    norm_values = norms.value[:, 0].copy()
    return GradNormResult(grads, norm_values, norm_values == 0.0)
