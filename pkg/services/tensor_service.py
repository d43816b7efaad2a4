"""
Dense tensor with reverse-mode automatic differentiation.

Every op builds its output with ``Tensor._make``, handing over a closure that
maps the output gradient to one gradient per input (``None`` where an input
does not need one). ``Graph`` orders the recorded nodes and ``backward`` runs
the closures in reverse, accumulating into ``grad``.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()
_gradient_faults: Dict[str, float] = {}


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale every gradient emitted by ``op`` nodes. Negative-control hook for grad checks."""
    _gradient_faults[op] = factor
    try:
        yield
    finally:
        _gradient_faults.pop(op, None)


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    # np.asarray keeps 0-d results of full reductions 0-d; ascontiguousarray would not.
    arr = np.asarray(data)
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise UsageError("unsupported dtype", {"dtype": str(dtype)})
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype in SUPPORTED_DTYPES:
        return np.asarray(arr, order="C")
    if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.complexfloating):
        raise UsageError("unsupported dtype", {"dtype": str(arr.dtype)})
    # ints, bools and python scalars are promoted silently
    return np.asarray(arr, dtype=DEFAULT_DTYPE, order="C")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting added to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in SUPPORTED_DTYPES:
            raise UsageError("unsupported dtype", {"dtype": str(self.data.dtype)})
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._inputs: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def _make(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}", {"op": op})
        out = cls(data, dtype=data.dtype)
        out.op = op
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._inputs = tuple(inputs)
            out._backward = backward
        return out

    # properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor", {"shape": list(self.shape)})
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # arithmetic

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


class Graph:
    """Topologically ordered op records reachable from one output."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise UsageError("backward needs a scalar loss", {"shape": list(loss.shape)})
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    graph = Graph.from_output(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        input_grads = node._backward(g)
        factor = _gradient_faults.get(node.op)
        for parent, pg in zip(node._inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient from {node.op}", {"op": node.op})
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), _backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero", {"op": "div"})
    out = a.data / b.data

    def _backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), _backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._make(out, (a,), _backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value", {"op": "log"})
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    out = np.clip(a.data, low, high)
    inside = (a.data >= low) & (a.data <= high)
    return Tensor._make(out, (a,), lambda g: (g * inside,), "clamp")


# reductions


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,), _backward, "mean")


# layout


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError("reshape must preserve the element count",
                             {"from": list(a.shape), "to": list(shape)}) from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise UsageError("concat needs at least one tensor")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != axis):
            raise DimensionError("concat inputs differ outside the concat axis",
                                 {"shapes": [list(t.shape) for t in xs], "axis": axis})
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor._make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), _backward, "concat")


def img2seq(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C]."""
    if x.ndim != 4:
        raise DimensionError("img2seq expects [N, C, H, W]", {"shape": list(x.shape)})
    n, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def seq2img(x: Tensor, h: int, w: int) -> Tensor:
    """[N, H*W, C] -> [N, C, H, W]; exact inverse of ``img2seq``."""
    if x.ndim != 3 or x.shape[1] != h * w:
        raise DimensionError("seq2img token count does not match h*w",
                             {"shape": list(x.shape), "h": h, "w": w})
    n, _, c = x.shape
    return transpose(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", {"a": list(a.shape), "b": list(b.shape)})

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), _backward, "matmul")


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b
