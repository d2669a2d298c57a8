# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .exceptions import NumericalError, ShapeError, TapeError

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class _GradState(threading.local):
    def __init__(self):
        self.enabled: bool = True
        self.tape: Optional[GradientTape] = None


_state = _GradState()


class Tensor:
    """
    Dense n-dimensional array participating in a reverse-mode gradient graph.

    Data is stored row-major in a NumPy array of type ``float32`` (the training type)
    or ``float64`` (used for gradient checks). Image tensors use the layout
    batch × channels × height × width.

    Tensors are immutable once created. The only state that changes is ``grad``,
    which :func:`backward` accumulates for leaf tensors.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        dtype = np.dtype(dtype)
        if dtype not in _SUPPORTED_DTYPES:
            raise ValueError(f'unsupported tensor dtype {dtype}')

        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        """Scalar buffer."""

        self.requires_grad: bool = requires_grad
        """Boolean indicating if gradients are computed for this tensor."""

        self.grad: Optional[np.ndarray] = None
        """Accumulated gradient (same shape and dtype as ``data``), or ``None``."""

        self.name: Optional[str] = name
        """Optional name, used as key in the gradient map returned by :func:`backward`."""

        self._creator: Optional[Function] = None
        self._tape: Optional[GradientTape] = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of the tensor."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """Scalar type."""
        return self.data.dtype

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of elements."""
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        """Boolean indicating if the tensor was not produced by a recorded operation."""
        return self._creator is None

    def numpy(self) -> np.ndarray:
        """Get a copy of the data as a NumPy array."""
        return self.data.copy()

    def item(self) -> float:
        """Get the value of a single-element tensor."""
        if self.size != 1:
            raise ShapeError(f'item() requires a single-element tensor, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Get a tensor sharing the data but cut off from the gradient graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        """Clear the accumulated gradient."""
        self.grad = None

    def __add__(self, other):
        from .ops import elementwise
        return elementwise('add', self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from .ops import elementwise
        return elementwise('sub', self, other)

    def __mul__(self, other):
        from .ops import elementwise
        if isinstance(other, Tensor):
            return elementwise('mul', self, other)
        return elementwise('scale', self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from .ops import elementwise
        return elementwise('scale', self, -1.0)


class Parameter(Tensor):
    """
    Named trainable tensor.

    The optimizer moment state belonging to a parameter is kept in the optimizer
    state object under the parameter's name.
    """

    def __init__(self, data: ArrayLike, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)

    def __repr__(self):
        return f'Parameter({self.name}, shape={self.shape}, dtype={self.dtype})'

    def assign(self, value: np.ndarray) -> None:
        """
        Replace the parameter values in place.

        :param value: New values; must have the parameter's shape.
        """
        if value.shape != self.shape:
            raise ShapeError(f'cannot assign shape {value.shape} to parameter {self.name} of shape {self.shape}')
        self.data[...] = value


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement :meth:`forward` on NumPy arrays and :meth:`backward`, which
    maps the gradient with respect to the output to one gradient per input
    (``None`` for inputs that need none).
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError('forward pass not implemented for this function')

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError('backward pass not implemented for this function')

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        """
        Run the operation and record it on the current tape if any input requires gradients.
        """
        func = cls()
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _state.enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            current_tape().record(func, tensors, out)
        return out


class GradientTape:
    """
    Ordered record of executed operations.

    Operations are appended while the forward pass runs. :meth:`backward` replays
    the record in reverse, visiting each operation exactly once, and accumulates
    gradients additively in a map keyed by tensor identity. Replaying consumes the
    tape; the next recorded operation starts a fresh one.
    """

    def __init__(self):
        self.operations: list[tuple[Function, tuple[Tensor, ...], Tensor]] = []
        """Recorded operations as (function, inputs, output)."""

        self.gradients: dict[int, np.ndarray] = {}
        """Accumulated gradients keyed by ``id(tensor)``."""

        self.consumed: bool = False
        """Boolean indicating if the tape has been replayed."""

    def record(self, func: Function, inputs: tuple[Tensor, ...], output: Tensor) -> None:
        for tensor in inputs:
            if tensor.requires_grad and not tensor.is_leaf and tensor._tape is not self:
                raise TapeError('operation input belongs to a consumed tape; detach() it first')
        func.inputs = inputs
        output._creator = func
        output._tape = self
        self.operations.append((func, inputs, output))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if self.consumed:
            raise TapeError('gradient tape has already been consumed by backward()')

        gradients = self.gradients
        gradients[id(loss)] = np.ones_like(loss.data)
        leaves: dict[int, Tensor] = {}

        for func, inputs, output in reversed(self.operations):
            grad = gradients.pop(id(output), None)
            if grad is None:
                continue
            input_grads = func.backward(grad)
            for tensor, input_grad in zip(inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in gradients:
                    gradients[key] = gradients[key] + input_grad
                else:
                    gradients[key] = input_grad
                if tensor.is_leaf:
                    leaves[key] = tensor

        self.consumed = True
        self.operations = []
        if _state.tape is self:
            _state.tape = None

        return _store_leaf_gradients(leaves.values(), gradients)


def _store_leaf_gradients(leaves, gradients: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    grad_map = {}
    for leaf in leaves:
        grad = gradients[id(leaf)].astype(leaf.dtype, copy=False)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        if leaf.name is not None:
            grad_map[leaf.name] = leaf.grad
    return grad_map


def current_tape() -> GradientTape:
    """
    Get the tape operations are currently recorded on.

    A new tape is started if none exists or the previous one has been consumed.
    """
    if _state.tape is None or _state.tape.consumed:
        _state.tape = GradientTape()
    return _state.tape


def is_grad_enabled() -> bool:
    """Boolean indicating if operations are currently recorded."""
    return _state.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Context manager disabling gradient recording.

    Operations executed inside the context produce tensors without gradient
    history, e.g. for inference or finite-difference evaluation.
    """
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """
    Compute gradients of a scalar loss by replaying its tape in reverse.

    Every leaf tensor with ``requires_grad`` reachable from ``loss`` receives the
    sum of all path contributions in its ``grad`` attribute. Tensors reached through
    several paths (such as the input of a residual block) therefore get the sum
    of the skip path and the regular path.

    :param loss: Scalar loss tensor.
    :return: Map from parameter name to gradient for all named leaves.
    :raises TapeError: If ``loss`` is not scalar, has no gradient history or its tape has been consumed.
    """
    if loss.size != 1:
        raise TapeError(f'backward() requires a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        raise TapeError('loss does not require gradients')

    if loss.is_leaf:
        return _store_leaf_gradients([loss], {id(loss): np.ones_like(loss.data)})

    tape = loss._tape
    if tape.consumed:
        raise TapeError('gradient tape has already been consumed by backward()')
    return tape.backward(loss)


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Compute the gradient of a scalar function by central differences.

    For every element ``i``, the result is ``(f(x + h·e_i) − f(x − h·e_i)) / (2h)``.
    ``x`` is perturbed in place and restored afterwards. Use ``float64`` tensors for
    meaningful accuracy.

    :param f: Pure, deterministic function returning a scalar.
    :param x: Point of evaluation.
    :param h: Step size (positive).
    :return: Gradient with the shape of ``x``.
    :raises NumericalError: If ``f`` returns a non-finite value.
    """
    if h <= 0:
        raise ValueError('finite difference step must be positive')

    def evaluate() -> float:
        value = f(x)
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise NumericalError(f'function value is not finite ({value})')
        return value

    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = evaluate()
            flat[i] = saved - h
            f_minus = evaluate()
            flat[i] = saved
            flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.astype(x.dtype, copy=False)
