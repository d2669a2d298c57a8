# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from typing import Optional

import numpy as np

from .enums import NormMode, PaddingMode
from .exceptions import ShapeError
from .ops import conv2d, conv_transpose2d, leaky_relu_op, normalize, tanh_op
from .tensor import Parameter, Tensor

DEFAULT_NORM_DELTA = 1e-5
"""Stabilizing constant δ of both normalization layers."""


class NormState:
    """
    Parameters of a normalization layer.

    If the layer is affine-free, ``gamma`` and ``beta`` are ``None`` and the layer
    behaves as if γ = 1 and β = 0.
    """

    def __init__(self, mode: NormMode, channels: int, delta: float = DEFAULT_NORM_DELTA, affine: bool = False,
                 name: str = 'norm', dtype=np.float32):
        if delta <= 0:
            raise ValueError('normalization delta must be positive')

        self.mode: NormMode = mode
        """Batch or instance statistics."""

        self.channels: int = channels
        """Number of channels."""

        self.delta: float = delta
        """Stabilizing constant δ added to the variance."""

        self.gamma: Optional[Parameter] = Parameter(np.ones(channels), f'{name}.gamma', dtype) if affine else None
        """Per-channel scale γ, or ``None`` if the layer is affine-free."""

        self.beta: Optional[Parameter] = Parameter(np.zeros(channels), f'{name}.beta', dtype) if affine else None
        """Per-channel shift β, or ``None`` if the layer is affine-free."""

    @property
    def affine(self) -> bool:
        """Boolean indicating if γ and β are learned."""
        return self.gamma is not None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta] if self.affine else []


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    """
    Leaky rectified linear unit.

    Returns ``x`` where ``x ≥ 0`` and ``α·x`` elsewhere. ``alpha = 0`` gives the ReLU.
    """
    if not np.isfinite(alpha):
        raise ValueError('slope must be finite')
    return leaky_relu_op(x, alpha)


def tanh_act(x: Tensor) -> Tensor:
    """Hyperbolic tangent activation."""
    return tanh_op(x)


def _check_norm_input(x: Tensor, state: NormState, mode: NormMode) -> None:
    if state.mode != mode:
        raise ValueError(f'normalization state has mode {state.mode.value}, expected {mode.value}')
    if x.ndim != 4:
        raise ShapeError(f'normalization input must be 4-D, got shape {x.shape}')
    if state.affine and x.shape[1] != state.channels:
        raise ShapeError(f'channel axis: input has {x.shape[1]} channels, normalization expects {state.channels}')


def batch_norm(x: Tensor, state: NormState) -> Tensor:
    """
    Batch normalization.

    Statistics (mean and biased variance) are computed per channel over batch,
    height and width.
    """
    _check_norm_input(x, state, NormMode.BATCH)
    return normalize(x, (0, 2, 3), state.delta, state.gamma, state.beta)


def instance_norm(x: Tensor, state: NormState) -> Tensor:
    """
    Instance normalization.

    Statistics are computed per sample and channel over height and width only,
    so samples of a batch never influence each other.
    """
    _check_norm_input(x, state, NormMode.INSTANCE)
    return normalize(x, (2, 3), state.delta, state.gamma, state.beta)


def init_weight(rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype) -> np.ndarray:
    """Gaussian initialization with mean 0."""
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Layer:
    """
    Building block of a :class:`ModelGraph`.
    """

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []


class Conv(Layer):
    """Convolution layer with bias."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, padding_mode: PaddingMode = PaddingMode.ZERO,
                 rng: Optional[np.random.Generator] = None, init_std: float = 0.02, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(init_weight(rng, (out_channels, in_channels, kernel, kernel), init_std, dtype),
                                f'{name}.weight')
        self.bias = Parameter(np.zeros(out_channels), f'{name}.bias', dtype)
        self.stride = stride
        self.padding = padding
        self.padding_mode = padding_mode

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class TransposeConv(Layer):
    """Transpose convolution layer with bias."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int = 2,
                 padding: int = 1, output_padding: int = 1, rng: Optional[np.random.Generator] = None,
                 init_std: float = 0.02, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(init_weight(rng, (in_channels, out_channels, kernel, kernel), init_std, dtype),
                                f'{name}.weight')
        self.bias = Parameter(np.zeros(out_channels), f'{name}.bias', dtype)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Norm(Layer):
    """Batch or instance normalization layer."""

    def __init__(self, state: NormState):
        self.state = state

    def __call__(self, x: Tensor) -> Tensor:
        if self.state.mode == NormMode.BATCH:
            return batch_norm(x, self.state)
        return instance_norm(x, self.state)

    def parameters(self) -> list[Parameter]:
        return self.state.parameters()


class LeakyReLU(Layer):
    """LeakyReLU activation layer (ReLU for ``alpha = 0``)."""

    def __init__(self, alpha: float):
        self.alpha = alpha

    def __call__(self, x: Tensor) -> Tensor:
        return leaky_relu(x, self.alpha)


class Tanh(Layer):
    """Tanh activation layer."""

    def __call__(self, x: Tensor) -> Tensor:
        return tanh_act(x)


class ResidualBlockParams:
    """
    Parameters of a residual block: two 3×3 stride-1 convolutions mapping
    ``channels`` to ``channels``, each followed by a normalization layer.
    """

    def __init__(self, name: str, channels: int, rng: Optional[np.random.Generator] = None,
                 init_std: float = 0.02, norm_mode: NormMode = NormMode.INSTANCE, affine: bool = False,
                 delta: float = DEFAULT_NORM_DELTA, dtype=np.float32):
        if channels < 1:
            raise ValueError('channel count must be positive')
        self.channels: int = channels
        """Channel count c of input, inner layers and output."""

        self.conv1 = Conv(f'{name}.conv1', channels, channels, 3, 1, 1, PaddingMode.REFLECT, rng, init_std, dtype)
        self.norm1 = NormState(norm_mode, channels, delta, affine, f'{name}.norm1', dtype)
        self.conv2 = Conv(f'{name}.conv2', channels, channels, 3, 1, 1, PaddingMode.REFLECT, rng, init_std, dtype)
        self.norm2 = NormState(norm_mode, channels, delta, affine, f'{name}.norm2', dtype)

    def parameters(self) -> list[Parameter]:
        return (self.conv1.parameters() + self.norm1.parameters()
                + self.conv2.parameters() + self.norm2.parameters())


def residual_block(x: Tensor, params: ResidualBlockParams) -> Tensor:
    """
    Residual block ``x + F(x)`` with identity skip path.

    ``F`` is conv 3×3 → normalization → ReLU → conv 3×3 → normalization. In the
    backward pass the input receives the upstream gradient through the skip path
    plus the gradient through ``F``.

    :raises ShapeError: If the channel count of ``x`` differs from ``params.channels``.
    """
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f'channel axis: residual block expects {params.channels} channels, got shape {x.shape}')
    y = params.conv1(x)
    y = Norm(params.norm1)(y)
    y = leaky_relu(y, 0.0)
    y = params.conv2(y)
    y = Norm(params.norm2)(y)
    return x + y


class ResidualBlock(Layer):
    """Residual block layer."""

    def __init__(self, params: ResidualBlockParams):
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block(x, self.params)

    def parameters(self) -> list[Parameter]:
        return self.params.parameters()
