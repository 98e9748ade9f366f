"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every differentiable operation builds its output through :meth:`Tensor.from_op`,
recording its parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the recorded graph in reverse
topological order and accumulates into the ``grad`` buffer of every leaf
tensor that requires gradients.

Image tensors use NCHW layout: ``(batch, channel, row, col)``.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from . import branches
from .errors import ContractError, DimensionError

DTYPE = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
        """Wrap an op result, recording the tape entry if any parent needs grads."""
        out = cls(np.asarray(data, dtype=DTYPE))
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self) -> Tensor:
        return tabs(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape, b_shape) -> None:
    # b may broadcast into a, never the other way round
    if a_shape == b_shape:
        return
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        out = None
    if out != tuple(a_shape):
        raise DimensionError(f"cannot broadcast {tuple(b_shape)} onto {tuple(a_shape)}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor.from_op(ad / bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b) -> Tensor:
    """Apply ``op_kind`` in {add, sub, mul, div} pointwise.

    ``b`` must either match ``a``'s shape or broadcast into it (e.g. a
    ``[1, C, 1, 1]`` channel vector or a ``[1, ...]`` batch-shared tensor);
    the result always has ``a``'s shape.
    """
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return fn(a, b)


def tabs(a: Tensor) -> Tensor:
    branches.note("abs", a.data >= 0)
    sign = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    branches.note("clamp", inside)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if _has_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), bw)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for k, (o, r) in enumerate(zip(other, ref)) if k != axis % len(ref)):
            raise DimensionError(f"concat shape mismatch: {tuple(ref)} vs {tuple(other)} on axis {axis}")
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def split(a: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    size = a.shape[axis]
    if size % parts:
        raise DimensionError(f"axis {axis} of size {size} not divisible into {parts} parts")
    step = size // parts
    out = []
    for k in range(parts):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        out.append(getitem(a, tuple(idx)))
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients live only for the duration of the call, so the
    tape can be replayed; a second call adds the same amount again.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE) if grad is None else grad}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
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


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
