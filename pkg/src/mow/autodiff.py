"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation of a forward pass; :func:`backward`
walks it in reverse and returns the gradient of the scalar root with respect
to a flat :class:`ParamVector`. Parameters never touched by the tape get an
exact zero gradient, which is how constants (e.g. frozen latent codes) are
kept out of the optimisation.

Arrays may carry leading batch axes; the matrix ops act on the last two.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "ParamVector",
    "Tape",
    "Var",
    "evaluate",
    "backward",
    "finite_diff_gradient",
    "central_difference",
    "affine",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "reciprocal",
    "total",
    "sum_axis",
    "mean",
    "sqnorm",
    "sort_rows",
    "concat_rows",
    "pairwise_sqdiff",
]


class NonFiniteError(FloatingPointError):
    """An intermediate value became NaN or infinite."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class ParamVector:
    """Flat float64 parameter vector with named, shaped segments."""

    values: np.ndarray
    segments: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        cursor = 0
        for name, (offset, shape) in sorted(self.segments.items(), key=lambda kv: kv[1][0]):
            if offset != cursor:
                raise ShapeError(f"segment {name!r} leaves a gap or overlap at offset {cursor}")
            cursor += int(np.prod(shape, dtype=np.int64))
        if cursor != self.values.size:
            raise ShapeError(f"segments cover {cursor} of {self.values.size} values")

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ParamVector:
        segments = {}
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            segments[name] = (offset, tuple(arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.segments[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset:offset + size].reshape(shape)

    def with_values(self, values: np.ndarray) -> ParamVector:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.values.shape}, got {values.shape}")
        return ParamVector(values.copy(), dict(self.segments))

    def copy(self) -> ParamVector:
        return self.with_values(self.values)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(scale(self, -1.0), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    scope: str
    floats: int
    param: str | None = None


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self, params: ParamVector | None = None):
        self.params = params
        self.nodes: list[_Node] = []
        self.root: int | None = None
        self._scope = "default"

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        """Tag nodes created inside the block (used for memory accounting)."""
        prev, self._scope = self._scope, name
        try:
            yield
        finally:
            self._scope = prev

    def floats_by_scope(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.scope] = counts.get(node.scope, 0) + node.floats
        return counts

    def _push(self, op, value, inputs=(), vjp=None, param=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by {op!r} (node {len(self.nodes)})")
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), vjp, self._scope, value.size, param))
        return Var(self, node_id, value)

    def param(self, name: str) -> Var:
        if self.params is None or name not in self.params.segments:
            raise KeyError(f"undeclared parameter {name!r}")
        return self._push("param", self.params.view(name), param=name)

    def const(self, value) -> Var:
        return self._push("const", np.array(value, dtype=np.float64))

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("variable belongs to a different tape")
            return x
        return self.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a tape variable")


def _unary(op: str, x: Var, value: np.ndarray, vjp) -> Var:
    return x.tape._push(op, value, (x.id,), vjp)


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra -----------------------------------------------------------

def matmul(a, w) -> Var:
    """``a @ w`` where ``a`` is ``(..., m, p)`` and ``w`` a plain ``(p, q)`` matrix."""
    tape = _tape_of(a, w)
    a, w = tape.lift(a), tape.lift(w)
    av, wv = a.value, w.value
    if wv.ndim != 2 or av.ndim < 1 or av.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {wv.shape}")

    def vjp(g):
        ga = g @ wv.T
        gw = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return tape._push("matmul", av @ wv, (a.id, w.id), vjp)


def affine(x, w, b) -> Var:
    """Dense layer ``x @ w + b``; the only broadcasting op (bias over rows)."""
    tape = _tape_of(x, w, b)
    x, w, b = tape.lift(x), tape.lift(w), tape.lift(b)
    xv, wv, bv = x.value, w.value, b.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ShapeError(f"affine: x{xv.shape} w{wv.shape} b{bv.shape} do not conform")

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)

    return tape._push("affine", xv @ wv + bv, (x.id, w.id, b.id), vjp)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_same("add", a.value, b.value)
    return tape._push("add", a.value + b.value, (a.id, b.id), lambda g: (g, g))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_same("sub", a.value, b.value)
    return tape._push("sub", a.value - b.value, (a.id, b.id), lambda g: (g, -g))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    _check_same("mul", av, bv)
    return tape._push("mul", av * bv, (a.id, b.id), lambda g: (g * bv, g * av))


def scale(x: Var, c: float) -> Var:
    return _unary("scale", x, x.value * c, lambda g: (g * c,))


def shift(x: Var, c: float) -> Var:
    return _unary("shift", x, x.value + c, lambda g: (g,))


def relu(x: Var) -> Var:
    mask = x.value > 0.0
    return _unary("relu", x, np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def sigmoid(x: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _unary("sigmoid", x, y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _unary("tanh", x, y, lambda g: (g * (1.0 - y * y),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return _unary("exp", x, y, lambda g: (g * y,))


def log(x: Var) -> Var:
    xv = x.value
    if np.any(xv <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _unary("log", x, np.log(xv), lambda g: (g / xv,))


def sqrt(x: Var) -> Var:
    if np.any(x.value < 0.0):
        raise NonFiniteError("sqrt of a negative value")
    y = np.sqrt(x.value)
    return _unary("sqrt", x, y, lambda g: (g * 0.5 / y,))


def reciprocal(x: Var) -> Var:
    if np.any(x.value == 0.0):
        raise NonFiniteError("reciprocal of zero")
    y = 1.0 / x.value
    return _unary("reciprocal", x, y, lambda g: (-g * y * y,))


# -- reductions ---------------------------------------------------------------

def total(x: Var) -> Var:
    shape = x.value.shape
    return _unary("sum", x, np.sum(x.value), lambda g: (np.broadcast_to(g, shape),))


def sum_axis(x: Var, axis: int | Sequence[int]) -> Var:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    shape = x.value.shape
    axes = tuple(sorted(a % len(shape) for a in axes))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _unary("sum_axis", x, x.value.sum(axis=axes), vjp)


def mean(x: Var) -> Var:
    return scale(total(x), 1.0 / x.value.size)


def sqnorm(x: Var) -> Var:
    xv = x.value
    return _unary("sqnorm", x, np.sum(xv * xv), lambda g: (2.0 * g * xv,))


# -- structural ---------------------------------------------------------------

def sort_rows(x: Var) -> Var:
    """Sort each column of ``(..., n, c)`` along the row axis; ties keep index order."""
    perm = np.argsort(x.value, axis=-2, kind="stable")
    y = np.take_along_axis(x.value, perm, axis=-2)

    def vjp(g):
        out = np.zeros_like(g)
        np.put_along_axis(out, perm, g, axis=-2)
        return (out,)

    return _unary("sort", x, y, vjp)


def concat_rows(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"concat_rows: {av.shape} and {bv.shape}")
    split = av.shape[0]
    return tape._push("concat", np.concatenate([av, bv]), (a.id, b.id),
                      lambda g: (g[:split], g[split:]))


def pairwise_sqdiff(a, b) -> Var:
    """``out[..., i, j, c] = (a[..., i, c] - b[..., j, c]) ** 2``."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-1]:
        raise ShapeError(f"pairwise_sqdiff: {av.shape} and {bv.shape}")
    diff = av[..., :, None, :] - bv[..., None, :, :]

    def vjp(g):
        t = 2.0 * g * diff
        return t.sum(axis=-2), -t.sum(axis=-3)

    return tape._push("pairwise_sqdiff", diff * diff, (a.id, b.id), vjp)


# -- driver -------------------------------------------------------------------

def evaluate(program: Callable[..., Var], params: ParamVector, *inputs) -> tuple[float, Tape]:
    """Run ``program(tape, *input_vars)`` and return its scalar value and tape."""
    tape = Tape(params)
    args = [tape.const(x) for x in inputs]
    # overflow surfaces as NonFiniteError from the tape, not as a warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = program(tape, *args)
    if not isinstance(out, Var) or out.tape is not tape:
        raise TapeError("program must return a variable of its own tape")
    if out.value.shape != ():
        raise ShapeError(f"program root must be scalar, got shape {out.value.shape}")
    tape.root = out.id
    return float(out.value), tape


def backward(tape: Tape) -> np.ndarray:
    """Gradient of the tape's scalar root with respect to every parameter."""
    if tape.root is None:
        raise TapeError("tape has no scalar root")
    params = tape.params
    grad = np.zeros(len(params) if params is not None else 0)
    adj: dict[int, np.ndarray] = {tape.root: np.ones(())}
    for node_id in range(tape.root, -1, -1):
        g = adj.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.param is not None:
            offset, shape = params.segments[node.param]
            size = int(np.prod(shape, dtype=np.int64))
            grad[offset:offset + size] += np.reshape(g, -1)
            continue
        if node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if src in adj:
                adj[src] = adj[src] + gi
            else:
                adj[src] = gi
    return grad


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float,
                       order: int = 2) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x``, coordinate by coordinate.

    ``order=4`` uses the five-point stencil, whose truncation error is
    O(epsilon^4) and so tolerates a larger step with less round-off.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-8, 1e-3]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        def at(h):
            y = x.copy()
            y.flat[i] += h
            return f(y)
        d1 = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon)
        if order == 2:
            out.flat[i] = d1
        else:
            d2 = (at(2 * epsilon) - at(-2 * epsilon)) / (4.0 * epsilon)
            out.flat[i] = (4.0 * d1 - d2) / 3.0
    return out


def finite_diff_gradient(program: Callable[..., Var], params: ParamVector, epsilon: float,
                         *inputs, order: int = 2) -> np.ndarray:
    """Central-difference estimate of the gradient of ``program``'s root."""
    return central_difference(lambda v: evaluate(program, params.with_values(v), *inputs)[0],
                              params.values, epsilon, order)
