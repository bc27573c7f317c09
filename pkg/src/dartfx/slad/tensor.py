# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` with a ``forward`` over numpy
arrays and a ``backward`` that returns one adjoint per input. Calling
:func:`backward` on a scalar loss records a :class:`Trace` of the operations that
produced it and replays the adjoints in reverse, *accumulating* into ``grad`` so
that parameters reached through several paths (shared adapters) receive the sum.
"""
from __future__ import annotations

from contextlib import contextmanager
import logging
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .errors import DimensionError, NumericalError, ParameterError, UsageError

DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations (evaluation passes, feature probes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A numpy array with a gradient slot and a reference to the operation that produced it."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _ctx: "Function | None" = None):
        self.data: np.ndarray = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._ctx = _ctx

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor", {"shape": self.shape})
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise UsageError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # shape helpers
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for param in params:
        param.zero_grad()


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` which maps the
    adjoint of the output to a tuple of adjoints, one per input (``None`` when the input
    does not need one).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        inputs = tuple(_as_tensor(t) for t in inputs)
        func = cls(*inputs)
        for key, value in params.items():
            setattr(func, key, value)
        out = func.forward(*(t.data for t in inputs))
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=func if requires_grad else None)

    def needs_grad(self, index: int) -> bool:
        return self.inputs[index].requires_grad


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions numpy broadcasting added so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        grad_a = unbroadcast(grad, a.shape) if a.requires_grad else None
        grad_b = unbroadcast(grad, b.shape) if b.requires_grad else None
        return grad_a, grad_b


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        grad_a = unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        grad_b = unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b


class Scale(Function):
    factor: float = 1.0

    def forward(self, a):
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight shared across the batch: contract every leading axis at once
                grad_b = a.data.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            else:
                grad_b = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape)
        return grad_a, grad_b


class Gelu(Function):
    _c = np.sqrt(2.0 / np.pi)

    def forward(self, x):
        self._t = np.tanh(self._c * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, grad):
        x = self.inputs[0].data
        t = self._t
        dt = (1.0 - t * t) * self._c * (1.0 + 3.0 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Reshape(Function):
    shape: tuple[int, ...] = ()

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    axes: tuple[int, ...] | None = None

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    axis: int = 0

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        sizes = [t.shape[self.axis] for t in self.inputs]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class SliceView(Function):
    """Contiguous slice along one axis; the forward result aliases the parent's storage."""

    axis: int = 0
    start: int = 0
    stop: int = 0

    def _index(self, ndim):
        axis = self.axis % ndim
        return (slice(None),) * axis + (slice(self.start, self.stop),)

    def forward(self, a):
        return a[self._index(a.ndim)]

    def backward(self, grad):
        parent = self.inputs[0]
        full = np.zeros(parent.shape, dtype=DTYPE)
        full[self._index(parent.ndim)] = grad
        return (full,)


class Sum(Function):
    axis: int | tuple[int, ...] | None = None
    keepdims: bool = False

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Gather(Function):
    """Embedding-style row lookup ``table[indices]`` along the first axis."""

    indices: np.ndarray = np.zeros(0, dtype=np.int64)

    def forward(self, table):
        return table[self.indices]

    def backward(self, grad):
        full = np.zeros(self.inputs[0].shape, dtype=DTYPE)
        np.add.at(full, self.indices, grad)
        return (full,)


class Softmax(Function):
    temperature: float = 1.0
    axis: int = -1

    def forward(self, x):
        z = x / self.temperature
        z = z - np.max(z, axis=self.axis, keepdims=True)
        e = np.exp(z)
        self._out = e / np.sum(e, axis=self.axis, keepdims=True)
        return self._out

    def backward(self, grad):
        s = self._out
        inner = np.sum(grad * s, axis=self.axis, keepdims=True)
        return (s * (grad - inner) / self.temperature,)


class LogSoftmax(Function):
    temperature: float = 1.0
    axis: int = -1

    def forward(self, x):
        z = x / self.temperature
        z = z - np.max(z, axis=self.axis, keepdims=True)
        log_norm = np.log(np.sum(np.exp(z), axis=self.axis, keepdims=True))
        out = z - log_norm
        self._softmax = np.exp(out)
        return out

    def backward(self, grad):
        total = np.sum(grad, axis=self.axis, keepdims=True)
        return ((grad - self._softmax * total) / self.temperature,)


class LayerNorm(Function):
    eps: float = 1e-6

    def forward(self, x, gamma, beta):
        mu = np.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = centered * self._inv
        return self._xhat * gamma + beta

    def backward(self, grad):
        x, gamma, beta = self.inputs
        xhat = self._xhat
        grad_gamma = grad_beta = grad_x = None
        if gamma.requires_grad:
            grad_gamma = np.sum((grad * xhat).reshape(-1, xhat.shape[-1]), axis=0)
        if beta.requires_grad:
            grad_beta = np.sum(grad.reshape(-1, grad.shape[-1]), axis=0)
        if x.requires_grad:
            n = xhat.shape[-1]
            gxhat = grad * gamma.data
            grad_x = (self._inv / n) * (
                n * gxhat
                - np.sum(gxhat, axis=-1, keepdims=True)
                - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True)
            )
        return grad_x, grad_gamma, grad_beta


# functional surface

def add(a, b) -> Tensor:
    return Add.apply(_as_tensor(a), _as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(_as_tensor(a), _as_tensor(b))


def scale(a, factor: float) -> Tensor:
    return Scale.apply(_as_tensor(a), factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {list(a.shape)} by {list(b.shape)}",
                             {"left": list(a.shape), "right": list(b.shape)})
    return MatMul.apply(a, b)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        np.empty(x.shape).reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {list(x.shape)} into {list(shape)}") from exc
    return Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes) if axes is not None else None)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concatenate needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"cannot concatenate {list(tensors[0].shape)} with {list(t.shape)} on axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def slice_view(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` of ``x`` along ``axis``.

    The forward data is a numpy view of the parent, so reads always reflect the parent's
    current values; the backward writes the adjoint into the parent at the sliced offsets.
    """
    size = x.shape[axis]
    if not 0 <= start <= stop <= size:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis {axis} of size {size}")
    return SliceView.apply(x, axis=axis, start=start, stop=stop)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(table: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError(f"gather indices out of range for {table.shape[0]} rows")
    return Gather.apply(table, indices=indices)


def softmax_temperature(logits: Tensor, T: float = 1.0, axis: int = -1) -> Tensor:
    if not T > 0:
        raise ParameterError("softmax temperature must be positive", {"T": T})
    return Softmax.apply(logits, temperature=float(T), axis=axis)


def log_softmax_temperature(logits: Tensor, T: float = 1.0, axis: int = -1) -> Tensor:
    if not T > 0:
        raise ParameterError("softmax temperature must be positive", {"T": T})
    return LogSoftmax.apply(logits, temperature=float(T), axis=axis)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm width {x.shape[-1]} does not match gamma {list(gamma.shape)} / beta {list(beta.shape)}")
    return LayerNorm.apply(x, gamma, beta, eps=float(eps))


class Trace:
    """Topologically ordered record of the tensors (and their producing operations) behind an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Trace":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                for parent in reversed(node._ctx.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    @property
    def operations(self) -> list[Function]:
        return [node._ctx for node in self.nodes if node._ctx is not None]

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.size != 1:
        raise UsageError("backward requires a scalar loss", {"shape": list(loss.shape)})
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    trace = Trace.record(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(trace.nodes):
        grad = adjoints.pop(id(node), None)
        if grad is None:
            continue
        node.grad = np.array(grad, dtype=DTYPE) if node.grad is None else node.grad + grad
        if node._ctx is None:
            continue
        for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = adjoints[key] + parent_grad if key in adjoints else parent_grad
    logging.debug(f"backward replayed {len(trace)} trace nodes")


class GradCheckReport(BaseModel):
    max_rel_error: list[float] = Field(default_factory=list)
    tolerance: float
    step: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central differences, element by element.

    ``f`` receives the input tensors positionally and must return a scalar. The relative
    error of each element is ``|a - n| / max(|a|, |n|, 1e-8)``; the report holds the
    maximum per input.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    try:
        return _grad_check(f, inputs, h, tol)
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
            t.zero_grad()


def _grad_check(f: Callable[..., Tensor], inputs: list[Tensor], h: float, tol: float) -> GradCheckReport:
    def evaluate() -> float:
        with no_grad():
            value = f(*inputs)
        if value.size != 1:
            raise UsageError("grad_check requires a scalar-valued function", {"shape": list(value.shape)})
        result = value.item()
        if not np.isfinite(result):
            raise NumericalError("grad_check function produced a non-finite value")
        return result

    out = f(*inputs)
    if out.size != 1:
        raise UsageError("grad_check requires a scalar-valued function", {"shape": list(out.shape)})
    if not np.isfinite(out.item()):
        raise NumericalError("grad_check function produced a non-finite value")
    backward(out)
    errors = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = 0.0
        for i in np.ndindex(t.data.shape):
            original = t.data[i]
            t.data[i] = original + h
            plus = evaluate()
            t.data[i] = original - h
            minus = evaluate()
            t.data[i] = original
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors.append(float(worst))
    return GradCheckReport(max_rel_error=errors, tolerance=tol, step=h)
