"""Reverse-mode automatic differentiation on an append-only tape.

Every node stores an ``(operation kind, input ids, value)`` record. Values are
float64 arrays; batched nodes have the batch on axis 0 and features on axis 1,
so an affine layer over a whole batch is one matmul node. A column of shape
``(batch, 1)`` is the "batched scalar" that PDE residuals are built from.

Gradients come from a reverse sweep whose vector-Jacobian rules are written in
terms of the same primitives. With ``create_graph=True`` the sweep records its
own work on the tape, so a first derivative is an ordinary node that can be
differentiated again (this is how second input derivatives are formed). With
``create_graph=False`` the sweep runs on raw arrays and leaves the tape alone.

Derivatives with respect to network inputs assume row independence: row ``i``
of the output depends only on row ``i`` of the inputs. Then the gradient of the
summed output is the per-row derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, UnsupportedOrderError

LEAF_KINDS = frozenset({"input", "param", "const"})


class Node(NamedTuple):
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict | None


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000.0

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def values(self) -> np.ndarray:
        """Flat view of the value, one entry per batch row for a column node."""
        return self.value.reshape(-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Var:
        return transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.node.kind}, shape={self.shape})"

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

    def __pow__(self, n):
        return pow_int(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mul(sum_(self), 1.0 / self.value.size)

    def __getitem__(self, cols):
        if not isinstance(cols, slice) or cols.step not in (None, 1):
            raise ContractError("only contiguous column slices are supported")
        start, stop, _ = cols.indices(self.shape[1])
        return slice_cols(self, start, stop)


class Tape:
    """Append-only record of a computation.

    When ``batch_size`` is given, every declared input must have that many
    rows. Without it, inputs of different sizes may share a tape (a loss that
    mixes collocation, boundary and initial points is built that way).
    Inputs always reference earlier node ids, so the node list is in
    topological order.
    """

    def __init__(self, batch_size: int | None = None, check_finite: bool = False):
        if batch_size is not None and batch_size < 1:
            raise ContractError("batch_size must be positive")
        self.batch_size = batch_size
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._derivative_cache: dict[tuple[int, int], int] = {}
        self.bindings: dict[int, object] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, value, attrs=None) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise EvaluationError(
                f"non-finite value produced by {kind!r}", _first_bad_row(value)
            )
        self.nodes.append(Node(kind, tuple(inputs), value, attrs))
        return Var(self, len(self.nodes) - 1)

    def input(self, values, name: str | None = None) -> Var:
        """Declare a coordinate channel. 1-D arrays become ``(batch, 1)`` columns."""
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if self.batch_size is not None and arr.shape[0] != self.batch_size:
            raise ContractError(
                f"input has {arr.shape[0]} rows, tape batch size is {self.batch_size}"
            )
        return self._push("input", (), arr, {"name": name})

    def param(self, array) -> Var:
        return self._push("param", (), np.asarray(array, dtype=np.float64))

    def const(self, array) -> Var:
        return self._push("const", (), np.asarray(array, dtype=np.float64))

    def record(self, kind: str, inputs: Sequence[Var | int], **attrs) -> Var:
        """Append an operation by kind name, e.g. ``record("mul", [x, x])``."""
        if kind not in _FORWARD:
            raise ContractError(f"unknown operation kind {kind!r}")
        vs = [Var(self, i) if isinstance(i, (int, np.integer)) else i for i in inputs]
        for v in vs:
            if not isinstance(v, Var) or v.tape is not self or v.id >= len(self.nodes):
                raise ContractError("record inputs must be existing nodes of this tape")
        return _apply(kind, vs, attrs)

    def reevaluate(self, feeds: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from its leaves, optionally replacing leaf values.

        Returns the fresh values; the recorded ones are left untouched.
        """
        feeds = feeds or {}
        vals: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.kind in LEAF_KINDS:
                vals.append(np.asarray(feeds.get(i, node.value), dtype=np.float64))
            else:
                args = [vals[j] for j in node.inputs]
                vals.append(_FORWARD[node.kind](*args, **(node.attrs or {})))
        return vals


def _first_bad_row(value):
    bad = np.argwhere(~np.isfinite(np.atleast_1d(value)))
    return int(bad[0][0]) if len(bad) else None


# ---------------------------------------------------------------------------
# forward kernels


def _div_fwd(a, b):
    b_arr = np.asarray(b)
    if np.any(b_arr == 0):
        row = int(np.argwhere(np.atleast_1d(b_arr) == 0)[0][0])
        raise EvaluationError("division by zero", batch_index=row)
    return a / b


def _sum_fwd(a, axis=None):
    if axis is None:
        s = np.sum(a)
        if not np.isfinite(s):
            raise EvaluationError("non-finite value in reduction", _first_bad_row(a))
        return np.asarray(s)
    return np.sum(a, axis=axis, keepdims=True)


def _sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def _pad_cols(a, start, total):
    out = np.zeros((a.shape[0], total))
    out[:, start : start + a.shape[1]] = a
    return out


_FORWARD: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": _div_fwd,
    "neg": lambda a: -a,
    "pow_int": lambda a, n: a**n,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "tanh_grad": lambda c, y: c * (1.0 - y * y),
    "exp": np.exp,
    "matmul": lambda a, b: a @ b,
    "transpose": lambda a: a.T,
    "sum": _sum_fwd,
    "broadcast_to": lambda a, shape: np.broadcast_to(a, shape).copy(),
    "sum_to": _sum_to,
    "slice_cols": lambda a, start, stop: a[:, start:stop].copy(),
    "pad_cols": _pad_cols,
    "concat_cols": lambda *xs: np.concatenate(xs, axis=1),
}


def _apply(kind, args, attrs=None):
    attrs = attrs or {}
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        return _FORWARD[kind](*[np.asarray(a, dtype=np.float64) for a in args], **attrs)
    ids, vals = [], []
    for a in args:
        if not isinstance(a, Var):
            a = tape.const(a)
        ids.append(a.id)
        vals.append(a.value)
    value = _FORWARD[kind](*vals, **attrs)
    return tape._push(kind, ids, value, attrs or None)


# ---------------------------------------------------------------------------
# primitives (work on Vars, recording, or on plain arrays, eagerly)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def neg(a):
    return _apply("neg", (a,))


def pow_int(a, n: int):
    if int(n) != n:
        raise ContractError("pow_int needs an integer exponent")
    return _apply("pow_int", (a,), {"n": int(n)})


def sin(a):
    return _apply("sin", (a,))


def cos(a):
    return _apply("cos", (a,))


def tanh(a):
    return _apply("tanh", (a,))


def tanh_grad(c, y):
    """``c * (1 - y**2)``: the cotangent through a tanh whose output is ``y``."""
    return _apply("tanh_grad", (c, y))


def exp(a):
    return _apply("exp", (a,))


def matmul(a, b):
    return _apply("matmul", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def sum_(a, axis=None):
    return _apply("sum", (a,), {"axis": axis})


def broadcast_to(a, shape):
    return _apply("broadcast_to", (a,), {"shape": tuple(shape)})


def sum_to(a, shape):
    return _apply("sum_to", (a,), {"shape": tuple(shape)})


def slice_cols(a, start, stop):
    return _apply("slice_cols", (a,), {"start": start, "stop": stop})


def pad_cols(a, start, total):
    return _apply("pad_cols", (a,), {"start": start, "total": total})


def concat_cols(*xs):
    return _apply("concat_cols", xs)


def affine(x, weight, bias):
    """``x @ weight + bias``; the matvec-affine layer used by every network."""
    return add(matmul(x, weight), bias)


def softmax_rows(z):
    # shifting by a constant row max leaves softmax and its derivatives unchanged
    zval = z.value if isinstance(z, Var) else np.asarray(z)
    e = exp(sub(z, zval.max(axis=1, keepdims=True)))
    return div(e, sum_(e, axis=1))


def _shape(x):
    return x.shape if isinstance(x, Var) else np.shape(x)


def _unbroadcast(g, shape):
    return g if _shape(g) == tuple(shape) else sum_to(g, shape)


# ---------------------------------------------------------------------------
# vector-Jacobian rules: (cotangent, output, inputs, attrs, need) -> input cotangents
# ``need[k]`` is False when input k does not depend on the differentiation
# targets; rules return None there instead of doing the work.


def _vjp_add(g, out, ins, at, need):
    a, b = ins
    return (
        _unbroadcast(g, _shape(a)) if need[0] else None,
        _unbroadcast(g, _shape(b)) if need[1] else None,
    )


def _vjp_sub(g, out, ins, at, need):
    a, b = ins
    return (
        _unbroadcast(g, _shape(a)) if need[0] else None,
        _unbroadcast(neg(g), _shape(b)) if need[1] else None,
    )


def _vjp_mul(g, out, ins, at, need):
    a, b = ins
    return (
        _unbroadcast(mul(g, b), _shape(a)) if need[0] else None,
        _unbroadcast(mul(g, a), _shape(b)) if need[1] else None,
    )


def _vjp_div(g, out, ins, at, need):
    a, b = ins
    return (
        _unbroadcast(div(g, b), _shape(a)) if need[0] else None,
        _unbroadcast(neg(div(mul(g, out), b)), _shape(b)) if need[1] else None,
    )


def _vjp_pow(g, out, ins, at, need):
    (a,) = ins
    n = at["n"]
    if n == 0:
        return (mul(g, 0.0),)
    if n == 1:
        return (g,)
    if n == 2:
        return (mul(g, mul(a, 2.0)),)
    return (mul(g, mul(pow_int(a, n - 1), float(n))),)


def _vjp_matmul(g, out, ins, at, need):
    a, b = ins
    return (
        matmul(g, transpose(b)) if need[0] else None,
        matmul(transpose(a), g) if need[1] else None,
    )


def _vjp_tanh_grad(g, out, ins, at, need):
    # out = c * (1 - y^2): d/dc = g * (1 - y^2), d/dy = -2 g c y
    c, y = ins
    return (
        tanh_grad(g, y) if need[0] else None,
        mul(mul(g, c), mul(y, -2.0)) if need[1] else None,
    )


def _vjp_concat(g, out, ins, at, need):
    grads, start = [], 0
    for x, n in zip(ins, need):
        width = _shape(x)[1]
        grads.append(slice_cols(g, start, start + width) if n else None)
        start += width
    return tuple(grads)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, out, ins, at, need: (neg(g),),
    "pow_int": _vjp_pow,
    "sin": lambda g, out, ins, at, need: (mul(g, cos(ins[0])),),
    "cos": lambda g, out, ins, at, need: (neg(mul(g, sin(ins[0]))),),
    "tanh": lambda g, out, ins, at, need: (tanh_grad(g, out),),
    "tanh_grad": _vjp_tanh_grad,
    "exp": lambda g, out, ins, at, need: (mul(g, out),),
    "matmul": _vjp_matmul,
    "transpose": lambda g, out, ins, at, need: (transpose(g),),
    "sum": lambda g, out, ins, at, need: (broadcast_to(g, _shape(ins[0])),),
    "broadcast_to": lambda g, out, ins, at, need: (sum_to(g, _shape(ins[0])),),
    "sum_to": lambda g, out, ins, at, need: (broadcast_to(g, _shape(ins[0])),),
    "slice_cols": lambda g, out, ins, at, need: (pad_cols(g, at["start"], _shape(ins[0])[1]),),
    "pad_cols": lambda g, out, ins, at, need: (
        slice_cols(g, at["start"], at["start"] + _shape(ins[0])[1]),
    ),
    "concat_cols": _vjp_concat,
}


def _backward(tape: Tape, out_id: int, wrt_ids: Sequence[int], create_graph: bool):
    nodes = tape.nodes
    targets = set(wrt_ids)
    lo = min(wrt_ids)
    reach = bytearray(out_id + 1)
    for i in targets:
        if i <= out_id:
            reach[i] = 1
    for i in range(lo, out_id + 1):
        if not reach[i]:
            for j in nodes[i].inputs:
                if reach[j]:
                    reach[i] = 1
                    break
    cot: dict[int, object] = {}
    if not reach[out_id]:
        return cot
    seed = np.ones_like(nodes[out_id].value)
    cot[out_id] = tape.const(seed) if create_graph else seed
    for i in range(out_id, lo - 1, -1):
        if i not in cot:
            continue
        node = nodes[i]
        if node.kind in LEAF_KINDS:
            continue
        g = cot[i] if i in targets else cot.pop(i)
        need = [bool(reach[j]) for j in node.inputs]
        if create_graph:
            ins = [Var(tape, j) for j in node.inputs]
            out = Var(tape, i)
            grads = _VJP[node.kind](g, out, ins, node.attrs or {}, need)
        else:
            ins = [nodes[j].value for j in node.inputs]
            grads = _VJP[node.kind](g, node.value, ins, node.attrs or {}, need)
        for j, gj, n in zip(node.inputs, grads, need):
            if not n or gj is None:
                continue
            cot[j] = add(cot[j], gj) if j in cot else gj
    return cot


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list:
    """Gradient of a scalar node with respect to each node in ``wrt``.

    Nodes the output does not depend on get an exact zero. With
    ``create_graph`` the results are Vars on the same tape.
    """
    if output.value.size != 1:
        raise ContractError(
            f"grad needs a reduced scalar output, got shape {output.shape}"
        )
    tape = output.tape
    for w in wrt:
        if w.tape is not tape:
            raise ContractError("gradient target lives on a different tape")
    if not wrt:
        return []
    cot = _backward(tape, output.id, [w.id for w in wrt], create_graph)
    result = []
    for w in wrt:
        g = cot.get(w.id)
        if g is None:
            zero = np.zeros_like(w.value)
            g = tape.const(zero) if create_graph else zero
        elif not create_graph:
            g = np.asarray(g, dtype=np.float64).reshape(w.shape)
        result.append(g)
    return result


@dataclass(frozen=True)
class DerivativeRequest:
    output: Var
    wrt: Var
    order: int = 1


def input_derivative(output: Var | DerivativeRequest, wrt: Var | None = None, order: int = 1) -> Var:
    """Per-row derivative of a batched column with respect to an input channel.

    The result is a node on the same tape, so it can be differentiated again.
    Repeated requests on one tape are served from a cache.
    """
    if isinstance(output, DerivativeRequest):
        output, wrt, order = output.output, output.wrt, output.order
    if order not in (1, 2):
        raise UnsupportedOrderError(f"derivative order {order} is not supported (1 or 2)")
    tape = output.tape
    if wrt.tape is not tape or tape.nodes[wrt.id].kind != "input":
        raise ContractError("derivatives are taken with respect to declared input channels")
    if order == 2:
        return input_derivative(input_derivative(output, wrt, 1), wrt, 1)
    key = (output.id, wrt.id)
    cached = tape._derivative_cache.get(key)
    if cached is not None:
        return Var(tape, cached)
    if output.value.size == 1:
        total = output
    else:
        total = sum_(output)
    (d,) = grad(total, [wrt], create_graph=True)
    tape._derivative_cache[key] = d.id
    return d


def input_derivatives(output: Var, wrt: Sequence[Var]) -> list[Var]:
    """First derivatives with respect to several channels from one reverse sweep."""
    tape = output.tape
    missing = [w for w in wrt if (output.id, w.id) not in tape._derivative_cache]
    if missing:
        total = sum_(output)
        for w in missing:
            if tape.nodes[w.id].kind != "input":
                raise ContractError("derivatives are taken with respect to declared input channels")
        for w, d in zip(missing, grad(total, missing, create_graph=True)):
            tape._derivative_cache[(output.id, w.id)] = d.id
    return [Var(tape, tape._derivative_cache[(output.id, w.id)]) for w in wrt]
