"""
Reverse-mode automatic differentiation over dense float64 matrices.

Define-by-run: every training step builds a fresh Tape, records one Node per
operation (a Wengert list), then walks the list backwards once. All values are
2-D arrays; scalars are 1x1. Elementwise ops broadcast numpy-style and reduce
the gradient back onto the broadcast operand.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

OPS = (
    "leaf", "matmul", "add", "sub", "mul", "scale", "tanh", "sigmoid",
    "identity", "square", "mean", "sum", "concat",
)

SIGMOID_CLAMP = 500.0


class ShapeError(ValueError):
    """Operand dimensions do not conform for the requested op."""


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array (vectors become columns)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum grad over the axes where the operand was broadcast."""
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


@dataclass(eq=False)
class Node:
    """One recorded value. `parents` are tape indices, so parents always precede the node."""

    __array_ufunc__ = None

    tape: Tape = field(repr=False)
    index: int
    value: np.ndarray
    op: str
    parents: tuple[int, ...] = ()
    arg: float | int | None = None
    name: str | None = None
    requires_grad: bool = False
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def _lift(self, other) -> Node:
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other) -> Node:
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other) -> Node:
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other) -> Node:
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other) -> Node:
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other) -> Node:
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        if np.ndim(other) == 0:
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self.tape.const(other))

    def __rmul__(self, other) -> Node:
        return self.__mul__(other)

    def __neg__(self) -> Node:
        return self.tape.scale(self, -1.0)

    def __pow__(self, exponent) -> Node:
        if exponent != 2:
            raise ShapeError(f"only squaring is recorded on the tape, got power {exponent!r}")
        return self.tape.square(self)

    def __matmul__(self, other) -> Node:
        return self.tape.matmul(self, self._lift(other))


class Tape:
    """Ordered list of nodes plus the indices of the parameter leaves (roots)."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.roots: list[int] = []

    def _record(self, value, op, parents=(), arg=None, name=None, requires_grad=None) -> Node:
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        node = Node(
            tape=self, index=len(self.nodes), value=value, op=op,
            parents=tuple(parents), arg=arg, name=name, requires_grad=requires_grad,
        )
        self.nodes.append(node)
        return node

    def _check(self, *inputs: Node) -> None:
        for node in inputs:
            if node.tape is not self:
                raise ShapeError(f"node {node.index} ({node.op}) belongs to another tape")

    # leaves

    def param(self, value, name: str) -> Node:
        """Parameter leaf: its gradient is returned by backward()."""
        node = self._record(as_matrix(value).copy(), "leaf", name=name, requires_grad=True)
        self.roots.append(node.index)
        return node

    def const(self, value) -> Node:
        return self._record(as_matrix(value), "leaf", requires_grad=False)

    # forward ops

    def forward_op(self, op: str, *inputs: Node, arg=None) -> Node:
        """Dispatch by op tag; the tag set is OPS minus 'leaf'."""
        if op not in OPS or op == "leaf":
            raise ShapeError(f"unknown op {op!r}")
        if op == "concat":
            return self.concat(list(inputs), axis=0 if arg is None else int(arg))
        if op == "scale":
            return self.scale(inputs[0], float(arg))
        if op in ("mean", "sum"):
            return getattr(self, op)(inputs[0], axis=arg)
        return getattr(self, op)(*inputs)

    def matmul(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return self._record(a.value @ b.value, "matmul", (a.index, b.index))

    def add(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        _broadcast_shape(a.value, b.value, "add")
        return self._record(a.value + b.value, "add", (a.index, b.index))

    def sub(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        _broadcast_shape(a.value, b.value, "sub")
        return self._record(a.value - b.value, "sub", (a.index, b.index))

    def mul(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        _broadcast_shape(a.value, b.value, "mul")
        return self._record(a.value * b.value, "mul", (a.index, b.index))

    def scale(self, a: Node, factor: float) -> Node:
        self._check(a)
        return self._record(a.value * factor, "scale", (a.index,), arg=float(factor))

    def tanh(self, a: Node) -> Node:
        self._check(a)
        return self._record(np.tanh(a.value), "tanh", (a.index,))

    def sigmoid(self, a: Node) -> Node:
        self._check(a)
        z = np.clip(a.value, -SIGMOID_CLAMP, SIGMOID_CLAMP)
        return self._record(1.0 / (1.0 + np.exp(-z)), "sigmoid", (a.index,))

    def identity(self, a: Node) -> Node:
        self._check(a)
        return self._record(a.value, "identity", (a.index,))

    def square(self, a: Node) -> Node:
        self._check(a)
        return self._record(a.value * a.value, "square", (a.index,))

    def mean(self, a: Node, axis: int | None = None) -> Node:
        self._check(a)
        if axis is None:
            value = np.full((1, 1), a.value.mean())
        else:
            value = a.value.mean(axis=axis, keepdims=True)
        return self._record(value, "mean", (a.index,), arg=axis)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        self._check(a)
        if axis is None:
            value = np.full((1, 1), a.value.sum())
        else:
            value = a.value.sum(axis=axis, keepdims=True)
        return self._record(value, "sum", (a.index,), arg=axis)

    def concat(self, inputs: list[Node], axis: int = 0) -> Node:
        if not inputs:
            raise ShapeError("concat: no inputs")
        self._check(*inputs)
        other = 1 - axis
        widths = {node.shape[other] for node in inputs}
        if len(widths) != 1:
            raise ShapeError(f"concat(axis={axis}): mismatched shapes {[n.shape for n in inputs]}")
        value = np.concatenate([node.value for node in inputs], axis=axis)
        return self._record(value, "concat", tuple(n.index for n in inputs), arg=axis)

    # reverse pass

    def _parent_grads(self, node: Node, g: np.ndarray) -> list[np.ndarray | None]:
        vals = [self.nodes[p].value for p in node.parents]
        op = node.op
        if op == "matmul":
            a, b = vals
            return [g @ b.T, a.T @ g]
        if op == "add":
            return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]
        if op == "sub":
            return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]
        if op == "mul":
            a, b = vals
            return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
        if op == "scale":
            return [g * node.arg]
        if op == "tanh":
            return [g * (1.0 - node.value * node.value)]
        if op == "sigmoid":
            return [g * node.value * (1.0 - node.value)]
        if op == "identity":
            return [g]
        if op == "square":
            return [2.0 * vals[0] * g]
        if op in ("mean", "sum"):
            shape = vals[0].shape
            if node.arg is None:
                count = shape[0] * shape[1]
            else:
                count = shape[node.arg]
            spread = np.broadcast_to(g, shape)
            return [spread / count if op == "mean" else spread.copy()]
        if op == "concat":
            axis = node.arg
            bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
            return list(np.split(g, bounds, axis=axis))
        raise ShapeError(f"no reverse rule for op {op!r}")

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter leaf, keyed by leaf name."""
        self._check(loss)
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or not node.requires_grad or not node.parents:
                continue
            for parent_idx, pg in zip(node.parents, self._parent_grads(node, node.grad)):
                parent = self.nodes[parent_idx]
                if not parent.requires_grad:
                    continue
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        grads = {}
        for idx in self.roots:
            node = self.nodes[idx]
            grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def merge_gradients(maps: list[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum gradient maps produced on independent tapes."""
    merged: dict[str, np.ndarray] = {}
    for grads in maps:
        for name, g in grads.items():
            merged[name] = merged[name] + g if name in merged else np.array(g, copy=True)
    return merged


def grad_check(
    build: Callable[[Tape, dict[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    samples_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """
    Relative error of the analytic gradient against central differences, in norm form.

    Per parameter array: ||analytic - central|| / (||analytic|| + ||central|| + eps), with Euclidean
    norms over the checked entries of that array. The max over arrays is returned. A per-entry ratio
    is not used: entries whose gradient is at rounding level would dominate it.
    samples_per_param limits the finite-difference checks per array (random entries).
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = {name: as_matrix(v).copy() for name, v in params.items()}

    def evaluate(values: dict[str, np.ndarray]) -> tuple[Tape, Node]:
        tape = Tape()
        nodes = {name: tape.param(v, name) for name, v in values.items()}
        return tape, build(tape, nodes)

    tape, loss = evaluate(base)
    analytic = tape.backward(loss)
    rng = np.random.default_rng(seed)
    eps = np.finfo(np.float64).eps
    worst = 0.0
    for name, value in base.items():
        flat_count = value.size
        if samples_per_param is None or samples_per_param >= flat_count:
            entries = np.arange(flat_count)
        else:
            entries = np.sort(rng.choice(flat_count, size=samples_per_param, replace=False))
        numeric = np.empty(len(entries))
        for i, flat in enumerate(entries):
            shifted_params = dict(base)
            shifted = value.copy()
            shifted.flat[flat] += h
            shifted_params[name] = shifted
            f_plus = evaluate(shifted_params)[1].value[0, 0]
            shifted = value.copy()
            shifted.flat[flat] -= h
            shifted_params[name] = shifted
            f_minus = evaluate(shifted_params)[1].value[0, 0]
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        exact = analytic[name].ravel()[entries]
        err = np.linalg.norm(exact - numeric) / (np.linalg.norm(exact) + np.linalg.norm(numeric) + eps)
        worst = max(worst, float(err))
    return worst
