"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` carrying a
:class:`Node` that records the operation tag, the input tensors and a closure
mapping the output gradient to input gradients.  Nodes receive a monotonically
increasing sequence number when created, so sorting the reachable nodes by
that number (descending) is a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_node_counter = itertools.count()
_state = threading.local()
_default_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    """Backpropagation record attached to a non-leaf tensor."""

    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_node_counter)

    def __repr__(self) -> str:
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """An n-dimensional array that can track gradients.

    ``data`` is a C-contiguous (row-major) numpy array; ``grad`` is either
    ``None`` or an array of the same shape.  Gradients accumulate across
    :meth:`backward` calls until :meth:`zero_grad` is called.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, node: Optional[Node] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    # ----------------------------------------------------------------- basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        if dtype == self.data.dtype:
            return self
        src_dtype = self.data.dtype
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(src_dtype),), "astype")

    # --------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not match {self.shape}")
        if self.node is None:
            if self.requires_grad:
                _accumulate(self, grad)
            return

        nodes = _reachable(self)
        pending = {id(self): grad}
        for tensor in nodes:
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            parent_grads = tensor.node.backward(g)
            for parent, pg in zip(tensor.node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg

    # ------------------------------------------------------------- operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # ---------------------------------------------------------- method sugar
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


# ----------------------------------------------------------------- internals
def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype)
    if g.shape != leaf.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {leaf.shape}")
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _reachable(root: Tensor) -> list:
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(p for p in t.node.parents if p.requires_grad)
    out.sort(key=lambda t: t.node.seq, reverse=True)
    return out


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, dtype=data.dtype)
    return Tensor(data, requires_grad=True, dtype=data.dtype, node=Node(op, parents, backward))


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return a, b


# ------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), backward, "div")


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch a binary elementwise operation by tag."""
    table = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed only where the input lies inside [lo, hi]."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes.

    Gradients: dA = dC @ B^T and dB = A^T @ dC, summed over broadcast axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None

    def backward(g):
        if bd.ndim == 2:
            # common "activations @ weight" case: avoid materialising per-batch weight grads
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward, "matmul")


# --------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


# ------------------------------------------------------------ shape changes
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} ({a.size} elements) into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from None
    return _make(out, (a,), lambda g: (unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; backward splits the gradient at the join offsets."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shape {t.shape} does not match {ref}")
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _make(out, tuple(tensors), backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slice or index ``a``; gradient is scattered back into a zero tensor."""
    shape, dtype = a.shape, a.dtype
    out = np.array(a.data[index], dtype=dtype)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis % (t.ndim + 1)
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)
