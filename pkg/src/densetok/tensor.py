"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every differentiable operation is a `Function` subclass: `forward` works on raw
numpy arrays, `backward` maps the output gradient to one gradient per input.
`Function.apply` wires the result into the tape when any input needs a gradient
and grad mode is on. Grad mode is thread-local, so a tape never crosses threads.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


class Tensor:
    """An n-dimensional float64 array that can take part in the gradient tape.

    `name` and `no_decay` only matter for parameters: the optimizer reads
    `no_decay` to skip weight decay, checkpoints are keyed by name.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        no_decay: bool = False,
        _ctx: Optional[Function] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.no_decay = no_decay
        self._ctx = _ctx

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape, then drop the tape."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            logger.debug("backward() on a tensor outside the tape; nothing to do")
            return

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.inputs, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

        for node in order:
            node._ctx = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Any) -> "Tensor":
        return Matmul.apply(self, as_tensor(other))

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # -- elementwise --------------------------------------------------------

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return PowScalar.apply(self, exponent=0.5)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def sin(self) -> "Tensor":
        return Sin.apply(self)

    def cos(self) -> "Tensor":
        return Cos.apply(self)

    def gelu(self) -> "Tensor":
        return Gelu.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=float(low), high=float(high))

    # -- reductions and movement --------------------------------------------

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        return total * (total.size / self.size)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(int(s) for s in shape))

    def permute(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=tuple(axes))

    def transpose(self, axis0: int = -2, axis1: int = -1) -> "Tensor":
        axes = list(range(self.ndim))
        axes[axis0], axes[axis1] = axes[axis1], axes[axis0]
        return self.permute(*axes)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))


def as_tensor(value: Any) -> Tensor:
    """Wrap scalars and arrays as constant tensors; tensors pass through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any, name: Optional[str] = None, no_decay: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True,
                  name=name, no_decay=no_decay)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

class _Binary(Function):
    def _shapes(self, a: np.ndarray, b: np.ndarray) -> None:
        _check_broadcast(a.shape, b.shape)
        self.a_shape, self.b_shape = a.shape, b.shape


class Add(_Binary):
    def forward(self, a, b):
        self._shapes(a, b)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.a_shape), _unbroadcast(grad, self.b_shape)


class Sub(_Binary):
    def forward(self, a, b):
        self._shapes(a, b)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.a_shape), _unbroadcast(-grad, self.b_shape)


class Mul(_Binary):
    def forward(self, a, b):
        self._shapes(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a_shape),
                _unbroadcast(grad * self.a, self.b_shape))


class Div(_Binary):
    def forward(self, a, b):
        self._shapes(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a_shape), _unbroadcast(gb, self.b_shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class PowScalar(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return np.power(x, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.x, self.exponent - 1.0),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Sin(Function):
    def forward(self, x):
        self.x = x
        return np.sin(x)

    def backward(self, grad):
        return (grad * np.cos(self.x),)


class Cos(Function):
    def forward(self, x):
        self.x = x
        return np.cos(x)

    def backward(self, grad):
        return (-grad * np.sin(self.x),)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, grad):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * self.x * self.x)
        return (grad * (self.cdf + self.x * pdf),)


class Clip(Function):
    def forward(self, x, low: float, high: float):
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.inside,)


# ---------------------------------------------------------------------------
# Reductions and movement
# ---------------------------------------------------------------------------

def _normalize_axes(axis: Union[None, int, Tuple[int, ...]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.sum(x, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.in_shape),)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, x, axes):
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
            raise ShapeError(f"invalid permutation {axes} for shape {x.shape}")
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort([a % grad.ndim for a in self.axes])),)


class BroadcastTo(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        _check_broadcast(x.shape, shape)
        return np.broadcast_to(x, shape)

    def backward(self, grad):
        return (_unbroadcast(grad, self.in_shape),)


class GetItem(Function):
    def forward(self, x, index):
        self.in_shape, self.index = x.shape, index
        return x[index]

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=DTYPE)
        parts = self.index if isinstance(self.index, tuple) else (self.index,)
        if any(isinstance(p, (list, np.ndarray)) for p in parts):
            np.add.at(out, self.index, grad)
        else:
            # basic indexing selects each element at most once
            out[self.index] = grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis: int):
        ref = arrays[0]
        axis = axis % ref.ndim
        for other in arrays[1:]:
            if other.ndim != ref.ndim or any(
                other.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
            ):
                raise ShapeError(
                    f"concat along axis {axis} needs matching shapes, got {ref.shape} "
                    f"and {other.shape}"
                )
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Matmul(Function):
    """Batched matrix product with numpy broadcasting over leading axes."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        _check_broadcast(a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


# ---------------------------------------------------------------------------
# Functional helpers
# ---------------------------------------------------------------------------

def add(x: Any, y: Any) -> Tensor:
    return as_tensor(x) + y


def sub(x: Any, y: Any) -> Tensor:
    return as_tensor(x) - y


def mul(x: Any, y: Any) -> Tensor:
    return as_tensor(x) * y


def gelu(x: Any) -> Tensor:
    return as_tensor(x).gelu()


def exp(x: Any) -> Tensor:
    return as_tensor(x).exp()


def clip(x: Any, low: float, high: float) -> Tensor:
    return as_tensor(x).clip(low, high)


def matmul(a: Any, b: Any) -> Tensor:
    return as_tensor(a) @ b


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*(as_tensor(t) for t in tensors), axis=axis)


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int = -1) -> List[Tensor]:
    """Split along `axis` into equal `sections` or at the given sizes."""
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or extent % sections:
            raise ShapeError(f"cannot split extent {extent} into {sections} equal parts")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ShapeError(f"split sizes {sizes} do not sum to extent {extent}")
    axis = axis % x.ndim
    parts = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        parts.append(x[tuple(index)])
        start += size
    return parts
