"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` linearises the graph reachable from a scalar loss into a
:class:`Tape` (execution order) and replays it in reverse.

Elementwise binary operations only broadcast singleton extents between tensors
of equal rank.  Python scalars are always accepted.  Anything else (rank
promotion, mismatched extents) raises :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype():
    return getattr(_state, "dtype", DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype.type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)


TensorLike = Tensor | float | int | np.ndarray


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch between shapes {a.shape} and {b.shape}")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(x, y, op):
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast(x.data, y.data, op)
    return x, y


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(x: TensorLike, y: TensorLike) -> Tensor:
    x, y = _binary_operands(x, y, "add")
    xs, ys = x.shape, y.shape
    return _record(
        x.data + y.data, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)), "add"
    )


def sub(x: TensorLike, y: TensorLike) -> Tensor:
    x, y = _binary_operands(x, y, "sub")
    xs, ys = x.shape, y.shape
    return _record(
        x.data - y.data, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)), "sub"
    )


def mul(x: TensorLike, y: TensorLike) -> Tensor:
    x, y = _binary_operands(x, y, "mul")
    xd, yd = x.data, y.data

    def fn(g):
        return (
            _unbroadcast(g * yd, xd.shape) if x.requires_grad else None,
            _unbroadcast(g * xd, yd.shape) if y.requires_grad else None,
        )

    return _record(xd * yd, (x, y), fn, "mul")


def hadamard(x: TensorLike, y: TensorLike) -> Tensor:
    """Elementwise product; only singleton extents broadcast."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != y.ndim:
        raise ShapeError(f"hadamard: rank mismatch between shapes {x.shape} and {y.shape}")
    return mul(x, y)


def div(x: TensorLike, y: TensorLike) -> Tensor:
    x, y = _binary_operands(x, y, "div")
    xd, yd = x.data, y.data

    def fn(g):
        return (
            _unbroadcast(g / yd, xd.shape) if x.requires_grad else None,
            _unbroadcast(-g * xd / (yd * yd), yd.shape) if y.requires_grad else None,
        )

    return _record(xd / yd, (x, y), fn, "div")


def neg(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: TensorLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd**exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),), "pow")


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def elu(x: TensorLike, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    neg_part = alpha * np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg_part)
    slope = np.where(xd > 0, 1.0, neg_part + alpha).astype(xd.dtype)
    return _record(out, (x,), lambda g: (g * slope,), "elu")


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), fn, "softmax")


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _record(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def apply_activation(x: TensorLike, kind: str, axis: int = -1) -> Tensor:
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (x,), fn, "sum")


def tmean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: TensorLike, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: TensorLike, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(x: TensorLike, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast_to: cannot change rank from {x.shape} to {shape}")
    _check_broadcast(x.data, np.empty(shape, dtype=bool), "broadcast_to")
    src = x.shape
    return _record(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def getitem(x: TensorLike, index) -> Tensor:
    x = as_tensor(x)
    src, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(x.data[index]), (x,), fn, "getitem")


def concat(parts: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty list")
    ref = parts[0]
    axis = _check_axis(axis, ref.ndim, "concat")
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(p.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat: ragged shapes {ref.shape} and {p.shape} along axis {axis}")
    if len(parts) == 1:
        return ref
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def stack(parts: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack: empty list")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"stack: ragged shapes {shape} and {p.shape}")
    axis = _check_axis(axis, len(shape) + 1, "stack")
    n = len(parts)
    return _record(
        np.stack([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    axis = _check_axis(axis, x.ndim, "unstack")
    index = [slice(None)] * x.ndim
    out = []
    for i in range(x.shape[axis]):
        index[axis] = i
        out.append(getitem(x, tuple(index)))
    return out


def reduce_mean(parts: Sequence[TensorLike]) -> Tensor:
    """Elementwise arithmetic mean of a non-empty list of equal-shaped tensors."""
    if len(parts) == 0:
        raise ShapeError("reduce_mean: empty list")
    if len(parts) == 1:
        return as_tensor(parts[0])
    return tmean(stack(parts, axis=0), axis=0)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(x: TensorLike, y: TensorLike) -> Tensor:
    """Batched matrix product with numpy's leading-dimension broadcasting.

    Both operands must have rank >= 2.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data

    def fn(g):
        gx = gy = None
        if x.requires_grad:
            gx = _reduce_lead(g @ np.swapaxes(yd, -1, -2), xd.shape)
        if y.requires_grad:
            gy = _reduce_lead(np.swapaxes(xd, -1, -2) @ g, yd.shape)
        return gx, gy

    return _record(xd @ yd, (x, y), fn, "matmul")


def _reduce_lead(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return _unbroadcast(g, shape)


def apply_linear(x: TensorLike, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last extent of ``x``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"apply_linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"apply_linear: bias shape {b.shape} does not match weight shape {W.shape}")
    xd, wd = x.data, W.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out.reshape(lead + (wd.shape[1],)), parents, fn, "linear")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Tape:
    """Operations reachable from a root, in execution (topological) order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given, members that the loss does not reach receive a zero
    gradient.  A loss can only be back-propagated once.
    """
    if loss.size != 1:
        raise BackwardError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward: this graph was already back-propagated")
    if not loss.requires_grad:
        raise BackwardError("backward: loss is not on the tape (no input requires grad)")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
    loss._consumed = True
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    return tape


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=True, name=name)
