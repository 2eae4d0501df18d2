"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op is a `Function` subclass. Calling `Function.apply` runs the forward
pass on numpy arrays and, when any input requires a gradient, records a `Node` on the active
`Tape`. `backward` walks that tape in exact reverse order.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}

_default_dtype = np.float32
_local = threading.local()


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def set_precision(name: str) -> None:
    global _default_dtype
    if name not in DTYPES:
        raise ValueError(f"Precision must be one of {sorted(DTYPES)} but got {name!r}")
    _default_dtype = DTYPES[name]
    logging.debug(f"Default tensor precision set to {name}")


def get_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Leaves (tensors not produced by an op) accumulate `grad` across `backward` calls until
    `zero_grad` is called. Op outputs are never modified in place.
    """

    def __init__(self, data, requires_grad: bool = False, dtype: type | None = None) -> None:
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: type | None = None) -> Tensor:
        return cls(np.zeros(tuple(shape), dtype=dtype or _default_dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"Only single-element tensors convert to float, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    function: Function
    inputs: tuple[Tensor, ...]
    output: Tensor
    tape: Tape
    index: int


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager, a tape becomes the active tape of the current thread. Ops
    outside any `with Tape()` block record nothing, so their outputs keep no history.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, function: Function, inputs: tuple[Tensor, ...], output: Tensor) -> None:
        node = Node(function, inputs, output, self, len(self.nodes))
        self.nodes.append(node)
        output.node = node


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Function:
    """Base class for differentiable ops.

    `forward` receives the numpy arrays of the input tensors and returns the output array.
    `backward` receives dLoss/dOutput and returns one array (or None) per input.
    """

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError()

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        function = cls(**kwargs)
        out = function.forward(*(t.data for t in tensors))
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")
        output = Tensor(out, dtype=out.dtype)
        tape = active_tape()
        if tape is not None and grad_enabled() and any(t.requires_grad for t in tensors):
            output.requires_grad = True
            tape.record(function, tensors, output)
        return output


def backward(loss: Tensor) -> None:
    """Populate `grad` on every leaf that `loss` depends on and that requires a gradient."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss but got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    tape = loss.node.tape
    grads = {id(loss): seed}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        grad = grads.pop(id(node.output), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.function.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor.node is None:
                _accumulate_leaf(tensor, input_grad)
            elif id(tensor) in grads:
                grads[id(tensor)] = grads[id(tensor)] + input_grad
            else:
                grads[id(tensor)] = input_grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = grad.astype(tensor.dtype, copy=False)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.zero_grad()


def _require_same_shape(op: str, *arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"{op} needs operands of equal shape but got {[a.shape for a in arrays]}")


class Add(Function):
    def forward(self, a, b):
        _require_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _require_same_shape("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _require_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def __init__(self, factor: float) -> None:
        self.factor = factor

    def forward(self, x):
        return x * x.dtype.type(self.factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Concat(Function):
    def __init__(self, axis: int) -> None:
        self.axis = axis

    def forward(self, *arrays):
        for a in arrays[1:]:
            other = a.shape[: self.axis] + a.shape[self.axis + 1 :]
            first = arrays[0].shape[: self.axis] + arrays[0].shape[self.axis + 1 :]
            if a.ndim != arrays[0].ndim or other != first:
                raise ValueError(
                    f"concat along axis {self.axis} got mismatched shapes "
                    f"{[x.shape for x in arrays]}"
                )
        self.sections = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.sections, axis=self.axis))


class Narrow(Function):
    def __init__(self, axis: int, start: int, stop: int) -> None:
        self.axis, self.start, self.stop = axis, start, stop

    def forward(self, x):
        if not 0 <= self.start < self.stop <= x.shape[self.axis]:
            raise ValueError(f"Cannot take [{self.start}:{self.stop}] of axis size {x.shape}")
        self.input_shape, self.dtype = x.shape, x.dtype
        index = [slice(None)] * x.ndim
        index[self.axis] = slice(self.start, self.stop)
        self.index = tuple(index)
        return x[self.index]

    def backward(self, grad):
        out = np.zeros(self.input_shape, dtype=self.dtype)
        out[self.index] = grad
        return (out,)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1 - self.y * self.y),)


class HardSigmoid(Function):
    """clip(0.2 * x + 0.5, 0, 1)"""

    def forward(self, x):
        linear = x * x.dtype.type(0.2) + x.dtype.type(0.5)
        self.mask = (linear > 0) & (linear < 1)
        return np.clip(linear, 0, 1)

    def backward(self, grad):
        return (grad * self.mask * grad.dtype.type(0.2),)


class ClampMax(Function):
    def __init__(self, limit: float) -> None:
        self.limit = limit

    def forward(self, x):
        self.mask = x < self.limit
        return np.where(self.mask, x, x.dtype.type(self.limit))

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x):
        self.input_shape = x.shape
        # flattened pairwise summation in row-major order
        return np.asarray(x.reshape(-1).sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.input_shape).copy(),)


class Conv2d(Function):
    """Stride-1 convolution (cross-correlation) with zero "same" padding.

    Windows are gathered into a (B, Cin, H, W, k, k) view and contracted with the kernel by
    `np.tensordot`, whose summation order is fixed for a given shape.
    """

    def forward(self, x, weight, bias=None):
        if x.ndim != 4 or weight.ndim != 4:
            raise ValueError(f"conv2d needs 4-d input and weight, got {x.shape} and {weight.shape}")
        c_out, c_in, k, k2 = weight.shape
        if k != k2 or k % 2 == 0:
            raise ValueError(f"conv2d needs a square kernel of odd size, got {k}x{k2}")
        if x.shape[1] != c_in:
            raise ValueError(
                f"conv2d input has {x.shape[1]} channels but the kernel expects {c_in}"
            )
        if bias is not None and bias.shape != (c_out,):
            raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
        pad = (k - 1) // 2
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        self.windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        self.weight, self.padded_shape, self.pad = weight, padded.shape, pad
        out = np.tensordot(self.windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        if bias is not None:
            out = out + bias
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        _, _, height, width = grad.shape
        k = self.weight.shape[-1]
        grad_weight = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = grad.sum(axis=(0, 2, 3))
        # (B, H, W, Cin, k, k)
        grad_windows = np.tensordot(grad, self.weight, axes=([1], [0]))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + height, j : j + width] += grad_windows[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        p = self.pad
        grad_input = grad_padded[:, :, p : p + height, p : p + width]
        return np.ascontiguousarray(grad_input), grad_weight, grad_bias


class MaxPool2(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"max_pool2 needs a 4-d input, got shape {x.shape}")
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{w}")
        windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(b, c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. ties go to the first cell in row-major order
        self.argmax = windows.argmax(axis=-1)
        self.input_shape = x.shape
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self.input_shape
        routed = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, self.argmax[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(b, c, h, w),)


class Upsample2(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"upsample2_nearest needs a 4-d input, got shape {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        b, c, h, w = grad.shape
        return (grad.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Narrow.apply(x, axis=axis, start=start, stop=stop)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def hard_sigmoid(x: Tensor) -> Tensor:
    return HardSigmoid.apply(x)


def clamp_max(x: Tensor, limit: float) -> Tensor:
    return ClampMax.apply(x, limit=limit)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight)
    return Conv2d.apply(x, weight, bias)


def max_pool2(x: Tensor) -> Tensor:
    return MaxPool2.apply(x)


def upsample2_nearest(x: Tensor) -> Tensor:
    return Upsample2.apply(x)
