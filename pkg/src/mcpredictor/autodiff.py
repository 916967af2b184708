"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A `Tensor` wraps a numpy float64 buffer. While a `Tape` is active (used as a
context manager), every primitive operation that touches a gradient-carrying
tensor appends a node holding its inputs and a vector-Jacobian closure.
`backward` walks the tape once in reverse and accumulates exact adjoints into
`Tensor.grad` on the leaves.

With no active tape the same operations are plain numpy math, so a forward
pass without recording is a pure function of its inputs.

All buffers are float64; the package trades throughput for verifiability, and
`finite_difference_check` is the independent oracle for every gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError

Array = np.ndarray


class Tensor:
    """Dense float64 array with gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic operators; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations, consumed once by `backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape] = []


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not _TAPE_STACK:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    tape = _TAPE_STACK[-1]
    out.requires_grad = True
    tape.nodes.append(_Node(out, inputs, vjp))
    tape._produced.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate adjoints of a scalar `loss` back through `tape`.

    Accumulates into `.grad` of every reachable leaf tensor that has
    `requires_grad` set. Gradients of tensors used several times add up.
    """
    if tape.consumed:
        raise NumericError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        holders.pop(id(node.out), None)
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            # out-of-place: vjps may return shared/readonly views
            grads[id(t)] = g if prev is None else prev + g
            holders[id(t)] = t
    for tid, g in grads.items():
        t = holders[tid]
        if id(t) in tape._produced:
            continue
        t.grad = np.array(g) if t.grad is None else t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out.data / b.data, b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * (0.5 / out.data),))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (g * (2.0 * a.data),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else a.data.size / out.data.size

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape),)
        gg = g / count
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape),)

    return _record(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    if a.size == 0:
        raise ValueError("softmax of an empty tensor is undefined")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0:
        raise ValueError("log_softmax of an empty tensor is undefined")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def gather(table: Tensor, idx: Array) -> Tensor:
    """Row lookup `table[idx]` along axis 0; adjoints scatter-add back."""
    idx = np.asarray(idx)
    out = Tensor(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), vjp)


def segment_sum(x: Tensor, segment_ids: Array, num_segments: int) -> Tensor:
    """Sum rows of `x` into `num_segments` buckets given by `segment_ids`."""
    segment_ids = np.asarray(segment_ids)
    out_data = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(out_data, segment_ids, x.data)
    out = Tensor(out_data)
    return _record(out, (x,), lambda g: (g[segment_ids],))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-advanced) indexing; each element selected at most once."""
    out = Tensor(a.data[key])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic gradients of `fn(params)` against central differences.

    `fn` must be deterministic (dropout off, fixed inputs) and built from the
    primitives of this module. Returns the max relative error over every
    coordinate of every `requires_grad` parameter, where the relative error of
    analytic `a` vs numeric `b` is |a-b| / max(1e-8, |a|+|b|).
    """
    first = float(as_tensor(fn(params)).data)
    second = float(as_tensor(fn(params)).data)
    if first != second:
        raise NumericError("fn is not deterministic: two evaluations differ")

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn(params)
    backward(loss, tape)

    worst = 0.0
    for p in params.values():
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(as_tensor(fn(params)).data)
            flat[i] = orig - epsilon
            f_minus = float(as_tensor(fn(params)).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def assert_finite(x: Tensor | Array, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


def parameters_of(named: Mapping[str, Tensor] | Iterable[Tensor]):
    """Iterate tensors from a name->Tensor mapping or plain iterable."""
    if isinstance(named, Mapping):
        return named.values()
    return named
