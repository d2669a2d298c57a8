# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .enums import PaddingMode
from .exceptions import ShapeError
from .tensor import Function, Tensor

Pair = Union[int, tuple[int, int]]

ELEMENTWISE_OPS = ('add', 'sub', 'mul', 'scale', 'abs', 'square')


def _pair(value: Pair) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    return int(value[0]), int(value[1])


def _as_padding_mode(mode) -> PaddingMode:
    return mode if isinstance(mode, PaddingMode) else PaddingMode(mode)


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent of a convolution along one axis."""
    return (extent + 2 * padding - kernel) // stride + 1


def conv_transpose_output_extent(extent: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    """Spatial output extent of a transpose convolution along one axis."""
    return (extent - 1) * stride - 2 * padding + kernel + output_padding


# --- padding -----------------------------------------------------------------

def _pad(x: np.ndarray, padding: tuple[int, int], mode: PaddingMode) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    if mode == PaddingMode.REFLECT:
        if ph >= x.shape[2]:
            raise ShapeError(f'height axis: reflect padding {ph} requires an extent above {ph}, got {x.shape[2]}')
        if pw >= x.shape[3]:
            raise ShapeError(f'width axis: reflect padding {pw} requires an extent above {pw}, got {x.shape[3]}')
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode='reflect')
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode='constant')


def _fold_reflect(grad: np.ndarray, pad: int, extent: int, axis: int) -> np.ndarray:
    # add the gradient of the mirrored border back onto its source rows/columns
    core = np.take(grad, np.arange(pad, pad + extent), axis=axis).copy()
    for k in range(1, pad + 1):
        src = [slice(None)] * grad.ndim
        dst = [slice(None)] * grad.ndim
        src[axis] = pad - k
        dst[axis] = k
        core[tuple(dst)] += grad[tuple(src)]
        src[axis] = pad + extent - 1 + k
        dst[axis] = extent - 1 - k
        core[tuple(dst)] += grad[tuple(src)]
    return core


def _unpad(grad: np.ndarray, padding: tuple[int, int], mode: PaddingMode, shape: tuple[int, ...]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return grad
    if mode == PaddingMode.REFLECT:
        grad = _fold_reflect(grad, ph, shape[2], axis=2) if ph > 0 else grad
        return _fold_reflect(grad, pw, shape[3], axis=3) if pw > 0 else grad
    return grad[:, :, ph:ph + shape[2], pw:pw + shape[3]]


# --- convolution -------------------------------------------------------------

class Conv2d(Function):

    def forward(self, x, weight, bias=None, stride=(1, 1), padding=(0, 0), padding_mode=PaddingMode.ZERO):
        self.stride = stride
        self.padding = padding
        self.padding_mode = padding_mode
        self.x_shape = x.shape
        self.weight = weight
        self.has_bias = bias is not None

        xp = _pad(x, padding, padding_mode)
        kh, kw = weight.shape[2:]
        sh, sw = stride
        self.windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        self.padded_shape = xp.shape

        out = np.tensordot(self.windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        weight = self.weight
        kh, kw = weight.shape[2:]
        sh, sw = self.stride
        ho, wo = grad.shape[2:]

        grad_weight = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3])).astype(weight.dtype, copy=False)

        cols = np.tensordot(grad, weight, axes=([1], [0]))  # n, ho, wo, c, kh, kw
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = _unpad(grad_xp, self.padding, self.padding_mode, self.x_shape)

        if self.has_bias:
            return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_weight


class ConvTranspose2d(Function):

    def forward(self, x, weight, bias=None, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)):
        self.x = x
        self.weight = weight
        self.stride = stride
        self.padding = padding
        self.has_bias = bias is not None

        n, _, h, w = x.shape
        c_out, kh, kw = weight.shape[1:]
        sh, sw = stride
        ph, pw = padding
        oph, opw = output_padding
        self.full_shape = (n, c_out, (h - 1) * sh + kh + oph, (w - 1) * sw + kw + opw)
        self.out_extent = (conv_transpose_output_extent(h, kh, sh, ph, oph),
                           conv_transpose_output_extent(w, kw, sw, pw, opw))

        cols = np.tensordot(x, weight, axes=([1], [0]))  # n, h, w, c_out, kh, kw
        full = np.zeros(self.full_shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w - 1) + 1:sw] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

        ho, wo = self.out_extent
        out = full[:, :, ph:ph + ho, pw:pw + wo]
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        x, weight = self.x, self.weight
        kh, kw = weight.shape[2:]
        sh, sw = self.stride
        ph, pw = self.padding
        ho, wo = self.out_extent
        h, w = x.shape[2:]

        grad_full = np.zeros(self.full_shape, dtype=grad.dtype)
        grad_full[:, :, ph:ph + ho, pw:pw + wo] = grad
        windows = sliding_window_view(grad_full, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h, :w]

        grad_x = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_weight = np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = np.ascontiguousarray(grad_x, dtype=x.dtype)
        grad_weight = grad_weight.astype(weight.dtype, copy=False)

        if self.has_bias:
            return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_weight


def _check_conv_input(input: Tensor, weight: Tensor, bias: Optional[Tensor], in_channel_axis: int,
                      out_channel_axis: int) -> None:
    if input.ndim != 4:
        raise ShapeError(f'input must be 4-D (batch, channels, height, width), got shape {input.shape}')
    if weight.ndim != 4:
        raise ShapeError(f'weight must be 4-D, got shape {weight.shape}')
    if input.shape[1] != weight.shape[in_channel_axis]:
        raise ShapeError(f'channel axis: input has {input.shape[1]} channels, '
                         f'weight expects {weight.shape[in_channel_axis]}')
    if bias is not None and bias.shape != (weight.shape[out_channel_axis],):
        raise ShapeError(f'bias must have shape ({weight.shape[out_channel_axis]},), got {bias.shape}')
    if input.dtype != weight.dtype:
        raise ShapeError(f'input dtype {input.dtype} does not match weight dtype {weight.dtype}')


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: Pair = 1, padding: Pair = 0,
           padding_mode: Union[PaddingMode, str] = PaddingMode.ZERO) -> Tensor:
    """
    2-D convolution (cross-correlation) of a batch of images.

    Output extent per spatial axis is ``floor((in + 2·pad − k) / stride) + 1``.

    :param input: Tensor of shape (batch, in_ch, height, width).
    :param weight: Filters of shape (out_ch, in_ch, kH, kW).
    :param bias: Optional bias of shape (out_ch,).
    :param stride: Stride per axis.
    :param padding: Padding per axis.
    :param padding_mode: Zero or reflect padding.
    :return: Tensor of shape (batch, out_ch, out_height, out_width).
    :raises ShapeError: If the shapes do not fit; the message names the offending axis.
    """
    stride, padding, padding_mode = _pair(stride), _pair(padding), _as_padding_mode(padding_mode)
    _check_conv_input(input, weight, bias, 1, 0)
    for axis, name in ((2, 'height'), (3, 'width')):
        padded = input.shape[axis] + 2 * padding[axis - 2]
        if padded < weight.shape[axis]:
            raise ShapeError(f'{name} axis: padded extent {padded} is smaller than kernel extent {weight.shape[axis]}')
        if stride[axis - 2] < 1:
            raise ShapeError(f'{name} axis: stride must be positive')

    tensors = (input, weight) if bias is None else (input, weight, bias)
    return Conv2d.apply(*tensors, stride=stride, padding=padding, padding_mode=padding_mode)


def conv_transpose2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: Pair = 1,
                     padding: Pair = 0, output_padding: Pair = 0) -> Tensor:
    """
    2-D transpose convolution, the adjoint of :func:`conv2d`.

    Output extent per spatial axis is ``(in − 1)·stride − 2·pad + k + output_padding``.
    For matching stride and padding, ``⟨conv2d(x, w), y⟩ == ⟨x, conv_transpose2d(y, w)⟩``.

    :param input: Tensor of shape (batch, in_ch, height, width).
    :param weight: Filters of shape (in_ch, out_ch, kH, kW).
    :param bias: Optional bias of shape (out_ch,).
    :param stride: Stride per axis.
    :param padding: Padding per axis (cropped from the full result).
    :param output_padding: Extra extent added on the bottom/right; must be smaller than the stride.
    :return: Tensor of shape (batch, out_ch, out_height, out_width).
    """
    stride, padding, output_padding = _pair(stride), _pair(padding), _pair(output_padding)
    _check_conv_input(input, weight, bias, 0, 1)
    for axis, name in ((0, 'height'), (1, 'width')):
        if stride[axis] < 1:
            raise ShapeError(f'{name} axis: stride must be positive')
        if output_padding[axis] >= stride[axis]:
            raise ShapeError(f'{name} axis: output padding {output_padding[axis]} must be smaller '
                             f'than stride {stride[axis]}')
        extent = conv_transpose_output_extent(input.shape[axis + 2], weight.shape[axis + 2], stride[axis],
                                              padding[axis], output_padding[axis])
        if extent < 1:
            raise ShapeError(f'{name} axis: output extent {extent} is not positive')

    tensors = (input, weight) if bias is None else (input, weight, bias)
    return ConvTranspose2d.apply(*tensors, stride=stride, padding=padding, output_padding=output_padding)


# --- elementwise and reductions --------------------------------------------

class Binary(Function):

    def forward(self, a, b, op='add'):
        self.op = op
        self.a, self.b = a, b
        if op == 'add':
            return a + b
        if op == 'sub':
            return a - b
        return a * b

    def backward(self, grad):
        if self.op == 'add':
            return grad, grad
        if self.op == 'sub':
            return grad, -grad
        return grad * self.b, grad * self.a


class Unary(Function):

    def forward(self, a, op='abs', scalar=0.0):
        self.op = op
        self.a = a
        self.scalar = scalar
        if op == 'add':
            return a + a.dtype.type(scalar)
        if op == 'sub':
            return a - a.dtype.type(scalar)
        if op in ('mul', 'scale'):
            return a * a.dtype.type(scalar)
        if op == 'abs':
            return np.abs(a)
        return np.square(a)

    def backward(self, grad):
        op = self.op
        if op in ('add', 'sub'):
            return grad,
        if op in ('mul', 'scale'):
            return grad * grad.dtype.type(self.scalar),
        if op == 'abs':
            return grad * np.sign(self.a),
        return grad * (2 * self.a),


def elementwise(op: str, a: Tensor, b: Union[Tensor, float, None] = None) -> Tensor:
    """
    Pointwise operation.

    :param op: One of ``add``, ``sub``, ``mul``, ``scale``, ``abs``, ``square``.
    :param a: First operand.
    :param b: Second operand (tensor of the same shape or scalar); ignored for ``abs`` and ``square``.
    :return: Pointwise result.
    :raises ShapeError: If ``a`` and ``b`` are tensors of different shape.
    """
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f'unknown elementwise operation {op}')
    if op in ('abs', 'square'):
        return Unary.apply(a, op=op)
    if isinstance(b, Tensor):
        if op == 'scale':
            raise ValueError('scale requires a scalar operand')
        if a.shape != b.shape:
            raise ShapeError(f'elementwise {op}: shape {a.shape} does not match shape {b.shape}')
        return Binary.apply(a, b, op=op)
    if b is None:
        raise ValueError(f'elementwise {op} requires a second operand')
    return Unary.apply(a, op=op, scalar=float(b))


class Reduce(Function):

    def forward(self, x, op='sum', axes=None):
        self.shape = x.shape
        self.axes = axes
        self.count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
        if op == 'mean':
            self.scale = 1.0 / self.count
            return np.asarray(np.mean(x, axis=axes), dtype=x.dtype)
        self.scale = 1.0
        return np.asarray(np.sum(x, axis=axes), dtype=x.dtype)

    def backward(self, grad):
        if self.axes is not None:
            grad = np.expand_dims(grad, axis=self.axes)
        return np.broadcast_to(grad * grad.dtype.type(self.scale), self.shape).copy(),


def reduce(op: str, x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """
    Sum or mean over the given axes (all axes if ``None``).

    The gradient of the mean spreads ``1/count`` onto every reduced element.
    """
    if op not in ('sum', 'mean'):
        raise ValueError(f'unknown reduction {op}')
    if axes is not None:
        axes = tuple(sorted(a % x.ndim if -x.ndim <= a < x.ndim else a for a in axes))
        if len(axes) == 0:
            raise ShapeError('reduction requires at least one axis')
        for a in axes:
            if not 0 <= a < x.ndim:
                raise ShapeError(f'reduction axis {a} is out of range for shape {x.shape}')
        if len(set(axes)) != len(axes):
            raise ShapeError(f'reduction axes {axes} contain duplicates')
    return Reduce.apply(x, op=op, axes=axes)


# --- activations and normalization ------------------------------------------

class LeakyRelu(Function):

    def forward(self, x, alpha=0.0):
        self.mask = x >= 0
        self.alpha = x.dtype.type(alpha)
        return np.where(self.mask, x, x * self.alpha)

    def backward(self, grad):
        return np.where(self.mask, grad, grad * self.alpha),


class Tanh(Function):

    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return grad * (1 - self.y * self.y),


class Normalize(Function):
    """Standardization over ``axes`` followed by an optional per-channel affine map."""

    def forward(self, x, gamma=None, beta=None, axes=(2, 3), delta=1e-5):
        self.axes = axes
        mu = x.mean(axis=axes, keepdims=True)
        var = np.square(x - mu).mean(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(delta))
        self.x_hat = (x - mu) * self.inv_std
        self.gamma = gamma
        self.affine = gamma is not None
        if not self.affine:
            return self.x_hat
        return self.x_hat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        axes = self.axes
        grad_hat = grad * self.gamma[None, :, None, None] if self.affine else grad
        mean_grad = grad_hat.mean(axis=axes, keepdims=True)
        mean_grad_hat = (grad_hat * self.x_hat).mean(axis=axes, keepdims=True)
        grad_x = self.inv_std * (grad_hat - mean_grad - self.x_hat * mean_grad_hat)
        if not self.affine:
            return grad_x,
        return grad_x, (grad * self.x_hat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))


def normalize(x: Tensor, axes: tuple[int, ...], delta: float, gamma: Optional[Tensor] = None,
              beta: Optional[Tensor] = None) -> Tensor:
    """
    Normalize ``x`` to zero mean and unit (biased) variance over ``axes``.

    Computes ``(x − μ) / √(σ² + δ)`` and, if ``gamma`` and ``beta`` are given,
    applies ``γ·x̂ + β`` per channel.
    """
    if gamma is None:
        return Normalize.apply(x, axes=axes, delta=delta)
    return Normalize.apply(x, gamma, beta, axes=axes, delta=delta)


def leaky_relu_op(x: Tensor, alpha: float) -> Tensor:
    return LeakyRelu.apply(x, alpha=alpha)


def tanh_op(x: Tensor) -> Tensor:
    return Tanh.apply(x)
