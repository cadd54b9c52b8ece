"""Dense float64 arrays with a reverse-mode gradient tape.

Every forward computation in the package is written against :class:`Tensor`.
Operations only record themselves when a :class:`Tape` is active on the
current thread and at least one input requires gradients, so inference runs
at plain numpy speed.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "NonDeterministicError",
    "ShapeError",
    "as_tensor",
    "backward",
    "matmul",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "take",
    "concat",
    "stack",
    "maximum_const",
    "max_reduce",
    "cumsum",
    "solve_unit_lower",
    "softmax",
    "log_softmax",
    "custom_op",
    "finite_diff_errors",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")  # keeps 0-d shapes
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", as_tensor(other), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    outputs: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, so every
    node's inputs were produced by an earlier node or are leaves.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set, repr=False)
    _leaf_ids: set[int] = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op: str, outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)
        for t in outputs:
            self._produced.add(id(t))
        self.nodes.append(Node(op, outputs, inputs, vjp))


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _finish(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(value)
    out = Tensor(value, requires_grad=True)
    tape.record(op, (out,), inputs, lambda gs: vjp(gs[0]))
    return out


def custom_op(
    op: str,
    values: Sequence[np.ndarray],
    inputs: Sequence[Tensor],
    vjp: Callable[[list[np.ndarray]], Sequence[np.ndarray | None]],
) -> tuple[Tensor, ...]:
    """Register a multi-output primitive with a hand-written vector-Jacobian product.

    ``vjp`` receives one gradient per output (zeros for outputs that did not
    reach the loss) and returns one gradient (or None) per input.
    """
    inputs = tuple(inputs)
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active()
    if tape is None or not any(t.requires_grad for t in inputs):
        return tuple(Tensor(v) for v in values)
    outs = tuple(Tensor(v, requires_grad=True) for v in values)
    tape.record(op, outs, inputs, vjp)
    return outs


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse accumulation over ``tape``; returns one gradient per leaf.

    Leaves that never influenced ``loss`` get zero arrays. The tape is not
    mutated, so calling this twice gives bit-identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is None:
        leaves = tape.leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        outs = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in outs):
            continue
        outs = [np.zeros_like(o.data) if g is None else g for g, o in zip(outs, node.outputs)]
        gins = node.vjp(outs)
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
    return [grads.get(id(t), np.zeros_like(t.data)).copy() for t in leaves]


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """Matrix product; stacked operands must share leading (batch) extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _finish("matmul", np.matmul(ad, bd), (a, b), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


_BINARY = {"add", "sub", "mul", "div"}
_UNARY = {"sigmoid", "tanh", "silu", "exp", "log", "sqrt", "square", "neg"}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Entry-wise operation.

    Binary tags (add, sub, mul, div) need equal shapes or a single-element
    operand. ``scale`` multiplies by the python number ``b``.
    """
    a = as_tensor(a)
    if tag == "scale":
        c = float(b)
        return _finish("scale", a.data * c, (a,), lambda g: (g * c,))
    if tag in _BINARY:
        b = as_tensor(b)
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{tag} shape mismatch: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        if a.shape != b.shape:
            # the single-element operand becomes a scalar; if both are single
            # elements the higher-rank shape is kept
            if a.size == 1 and (b.size != 1 or a.ndim <= b.ndim):
                ad = ad.reshape(())
            else:
                bd = bd.reshape(())
        sa, sb = a.shape, b.shape
        if tag == "add":
            out = ad + bd
            vjp = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
        elif tag == "sub":
            out = ad - bd
            vjp = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
        elif tag == "mul":
            out = ad * bd
            vjp = lambda g: (
                _reduce_to(g * bd, sa) if a.requires_grad else None,
                _reduce_to(g * ad, sb) if b.requires_grad else None,
            )
        else:
            if np.any(bd == 0):
                raise ZeroDivisionError("div by zero entry")
            out = ad / bd
            vjp = lambda g: (
                _reduce_to(g / bd, sa) if a.requires_grad else None,
                _reduce_to(-g * ad / (bd * bd), sb) if b.requires_grad else None,
            )
        return _finish(tag, out, (a, b), vjp)
    if tag not in _UNARY:
        raise ValueError(f"unknown elementwise tag {tag!r}")
    x = a.data
    if tag == "sigmoid":
        out = _sigmoid(x)
        vjp = lambda g: (g * out * (1.0 - out),)
    elif tag == "tanh":
        out = np.tanh(x)
        vjp = lambda g: (g * (1.0 - out * out),)
    elif tag == "silu":
        s = _sigmoid(x)
        out = x * s
        vjp = lambda g: (g * (s * (1.0 + x * (1.0 - s))),)
    elif tag == "exp":
        with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
            out = np.exp(x)
        vjp = lambda g: (g * out,)
    elif tag == "log":
        if np.any(x <= 0):
            raise ValueError("log of non-positive entry")
        out = np.log(x)
        vjp = lambda g: (g / x,)
    elif tag == "sqrt":
        if np.any(x < 0):
            raise ValueError("sqrt of negative entry")
        out = np.sqrt(x)
        vjp = lambda g: (g * 0.5 / out,)
    elif tag == "square":
        out = x * x
        vjp = lambda g: (g * 2.0 * x,)
    else:
        out = -x
        vjp = lambda g: (-g,)
    return _finish(tag, out, (a,), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return elementwise("scale", sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape)
    lead = len(shape) - len(src)
    expanded = tuple(i for i in range(len(shape)) if i < lead or src[i - lead] == 1 and shape[i] != 1)

    def vjp(g):
        return (g.sum(axis=expanded).reshape(src) if expanded else g,)

    return _finish("broadcast", out, (a,), vjp)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        gg = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        rest = gg.shape[index.ndim :]
        width = int(np.prod(rest))
        flat = (index.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
        summed = np.bincount(flat, weights=gg.reshape(-1), minlength=shape[axis] * width)
        return (np.moveaxis(summed.reshape((shape[axis],) + rest), 0, axis),)

    return _finish("take", np.take(a.data, index, axis=axis), (a,), vjp)


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        ga[index] = g  # basic slicing only; no repeated positions
        return (ga,)

    return _finish("getitem", a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _finish("stack", np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def maximum_const(a, floor: float) -> Tensor:
    """max(a, floor) entry-wise; gradient passes only where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return _finish("maximum_const", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def max_reduce(a, axis: int = 0) -> Tensor:
    """Maximum along ``axis``; ties send the gradient to the lowest index."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _finish("max_reduce", np.max(a.data, axis=axis), (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _finish("cumsum", np.cumsum(a.data, axis=axis), (a,), vjp)


def _solve_lower(L: np.ndarray, B: np.ndarray, trans: bool) -> np.ndarray:
    if L.ndim == 2:
        return solve_triangular(L, B, lower=True, unit_diagonal=True, trans=int(trans))
    return np.stack([_solve_lower(Li, Bi, trans) for Li, Bi in zip(L, B)])


def solve_unit_lower(A, B) -> Tensor:
    """Solve ``(I + A) X = B`` with ``A`` strictly lower triangular.

    Entries of ``A`` on or above the diagonal are ignored (and get zero
    gradient). Leading axes are batch axes.
    """
    A, B = as_tensor(A), as_tensor(B)
    n = A.shape[-1]
    if A.shape[-2] != n or B.shape[-2] != n or A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"solve shape mismatch: {A.shape} vs {B.shape}")
    strict = np.tril(np.ones((n, n)), -1)
    L = A.data * strict + np.eye(n)
    X = _solve_lower(L, B.data, trans=False)

    def vjp(g):
        gB = _solve_lower(L, g, trans=True)
        gA = -np.matmul(gB, np.swapaxes(X, -1, -2)) * strict if A.requires_grad else None
        return gA, gB

    return _finish("solve_unit_lower", X, (A, B), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    # shift is a constant: log-softmax is invariant to it
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = a - broadcast_to(shift, a.shape)
    lse = elementwise("log", sum(elementwise("exp", z), axis=axis, keepdims=True))
    return z - broadcast_to(lse, a.shape)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = elementwise("exp", a - broadcast_to(shift, a.shape))
    return e / broadcast_to(sum(e, axis=axis, keepdims=True), a.shape)


# ---------------------------------------------------------------------------
# finite-difference oracle

GRAD_ERR_FLOOR = 1e-8


def _evaluate(f, params: list[Tensor]) -> float:
    out = f(params)
    return float(as_tensor(out).data.reshape(-1)[0])


def finite_diff_errors(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = GRAD_ERR_FLOOR,
) -> list[float]:
    """Worst relative gradient error per parameter array.

    The analytic gradient comes from one taped evaluation of ``f``; the
    numeric one from central differences (f(p+h) - f(p-h)) / 2h. The error
    is ``|ga - gn| / max(|ga| + |gn|, floor)`` so that entries whose true
    gradient is zero are judged on roundoff, not on a 0/0 ratio. With
    ``max_entries`` only a random subset of each array's entries is probed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    leaves = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
    with Tape() as tape:
        loss = f(leaves)
    analytic = backward(tape, loss, leaves)
    base = _evaluate(f, leaves)
    if base != _evaluate(f, leaves):
        raise NonDeterministicError("f returned different values for identical parameters")
    rng = np.random.default_rng(seed)
    errors = []
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f, leaves)
            flat[i] = orig - h
            fm = _evaluate(f, leaves)
            flat[i] = orig
            gn = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - gn) / max(abs(gflat[i]) + abs(gn), floor)
            worst = max(worst, err)
        errors.append(worst)
    return errors


def finite_diff_check(
    f, params, h: float = 1e-5, max_entries: int | None = None, seed: int = 0, floor: float = GRAD_ERR_FLOOR
) -> float:
    """Maximum relative error between taped and central-difference gradients."""
    errs = finite_diff_errors(f, params, h, max_entries, seed, floor)
    return max(errs) if errs else 0.0
