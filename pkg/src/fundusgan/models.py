# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import Iterator, Mapping

import numpy as np

from .enums import Activation, NormMode, PaddingMode
from .exceptions import ShapeError
from .layers import Conv, DEFAULT_NORM_DELTA, Layer, LeakyReLU, Norm, NormState, ResidualBlock, \
    ResidualBlockParams, Tanh, TransposeConv
from .tensor import Parameter, Tensor

DEFAULT_ALPHA = 0.325
"""LeakyReLU slope."""

GENERATOR_ROLES = ('G_M', 'G_N')
DISCRIMINATOR_ROLES = ('D_M', 'D_N')


@dataclass
class GeneratorConfig:
    """Generator architecture."""

    input_channels: int = 3
    """Number of image channels."""

    base_filters: int = 64
    """Filters of the first convolution; doubled by each downsampling stage."""

    n_res_blocks: int = 9
    """Number of residual blocks."""

    image_size: int = 256
    """Side length of the square input images."""

    alpha: float = DEFAULT_ALPHA
    """LeakyReLU slope of the non-residual layers."""

    activation: Activation = Activation.LEAKY
    """Activation of the non-residual layers."""

    norm: NormMode = NormMode.INSTANCE
    """Normalization of all generator layers."""

    norm_affine: bool = False
    """Boolean indicating if normalization layers learn γ and β."""

    norm_delta: float = DEFAULT_NORM_DELTA
    """Stabilizing constant of the normalization layers."""

    init_std: float = 0.02
    """Standard deviation of the Gaussian weight initialization."""

    def validate(self) -> None:
        if self.image_size < 4 or self.image_size % 4 != 0:
            raise ShapeError(f'generator image size must be a positive multiple of 4, got {self.image_size}')
        if self.n_res_blocks < 1:
            raise ValueError('generator needs at least one residual block')
        if self.input_channels < 1 or self.base_filters < 1:
            raise ValueError('channel and filter counts must be positive')

    def to_dict(self) -> dict:
        values = asdict(self)
        values['activation'] = self.activation.value
        values['norm'] = self.norm.value
        return values

    @classmethod
    def from_dict(cls, values: Mapping) -> GeneratorConfig:
        values = dict(values)
        values['activation'] = Activation(values['activation'])
        values['norm'] = NormMode(values['norm'])
        return cls(**values)


@dataclass
class DiscriminatorConfig:
    """Patch discriminator architecture."""

    input_channels: int = 3
    """Number of image channels."""

    filters: tuple[int, ...] = field(default=(64, 128, 256, 512, 512))
    """Filter count of each stride-2 stage."""

    alpha: float = DEFAULT_ALPHA
    """LeakyReLU slope."""

    norm_affine: bool = False
    """Boolean indicating if normalization layers learn γ and β."""

    norm_delta: float = DEFAULT_NORM_DELTA
    """Stabilizing constant of the normalization layers."""

    init_std: float = 0.02
    """Standard deviation of the Gaussian weight initialization."""

    @property
    def downsampling(self) -> int:
        """Factor by which the score map is smaller than the input."""
        return 2 ** len(self.filters)

    def validate(self) -> None:
        if len(self.filters) < 1 or any(f < 1 for f in self.filters):
            raise ValueError('discriminator needs at least one stage with a positive filter count')

    def to_dict(self) -> dict:
        values = asdict(self)
        values['filters'] = list(self.filters)
        return values

    @classmethod
    def from_dict(cls, values: Mapping) -> DiscriminatorConfig:
        values = dict(values)
        values['filters'] = tuple(values['filters'])
        return cls(**values)


class ModelGraph:
    """
    Ordered composition of layers with named parameters.

    Parameter names are prefixed with the model's role (``G_M``, ``G_N``, ``D_M``
    or ``D_N``), so the parameters of all four networks can share one gradient map.
    """

    def __init__(self, role: str, layers: list[tuple[str, Layer]], config):
        self.role: str = role
        """Role tag of the model."""

        self.layers: list[tuple[str, Layer]] = layers
        """Layers in execution order, with their names."""

        self.config = config
        """Architecture configuration the graph was built from."""

        self._params: dict[str, Parameter] = {}
        for _, layer in layers:
            for param in layer.parameters():
                if param.name in self._params:
                    raise ValueError(f'duplicate parameter name {param.name}')
                self._params[param.name] = param

    def __repr__(self):
        return f'ModelGraph({self.role}, layers={len(self.layers)}, parameters={self.parameter_count()})'

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if isinstance(self.config, DiscriminatorConfig):
            factor = self.config.downsampling
            if x.ndim != 4 or x.shape[2] % factor != 0 or x.shape[3] % factor != 0:
                raise ShapeError(f'height/width axis: discriminator input extents must be divisible by {factor}, '
                                 f'got shape {x.shape}')
        elif isinstance(self.config, GeneratorConfig):
            if x.ndim != 4 or x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
                raise ShapeError(f'height/width axis: generator input extents must be divisible by 4, '
                                 f'got shape {x.shape}')
        for _, layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> dict[str, Parameter]:
        """Parameters by name, in layer order."""
        return dict(self._params)

    def parameter_count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    @contextmanager
    def frozen(self) -> Iterator[None]:
        """
        Context manager excluding the parameters from gradient computation.

        Gradients still flow through the model to its input.
        """
        for param in self._params.values():
            param.requires_grad = False
        try:
            yield
        finally:
            for param in self._params.values():
                param.requires_grad = True

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values by name."""
        return {name: param.numpy() for name, param in self._params.items()}

    def load_state(self, tensors: Mapping[str, np.ndarray]) -> None:
        """
        Replace all parameter values.

        :param tensors: Values by parameter name; must contain every parameter with matching shape and dtype.
        :raises ShapeError: If parameters are missing or shapes/dtypes differ. The message lists all mismatches.
        """
        problems = []
        for name, param in self._params.items():
            value = tensors.get(name)
            if value is None:
                problems.append(f'{name}: missing')
            elif value.shape != param.shape:
                problems.append(f'{name}: shape {value.shape} does not match {param.shape}')
            elif value.dtype != param.dtype:
                problems.append(f'{name}: dtype {value.dtype} does not match {param.dtype}')
        if problems:
            raise ShapeError(f'cannot load state into {self.role}: ' + '; '.join(problems))
        for name, param in self._params.items():
            param.assign(tensors[name])


def build_generator(cfg: GeneratorConfig, seed: int, role: str = 'G_N', dtype=np.float32) -> ModelGraph:
    """
    Build a ResNet encoder/decoder generator.

    Layout: 7×7 reflect conv(f) → norm → act → 3×3/2 conv(2f) → norm → act →
    3×3/2 conv(4f) → norm → act → residual blocks(4f) → 3×3/2 convᵀ(2f) → norm → act →
    3×3/2 convᵀ(f) → norm → act → 7×7 reflect conv(3) → tanh, where ``f`` is
    ``cfg.base_filters``. The output has the input's shape.

    :param cfg: Architecture configuration.
    :param seed: Seed of the weight initialization.
    :param role: Role tag used as parameter name prefix.
    :param dtype: Parameter type.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    f = cfg.base_filters
    std = cfg.init_std
    alpha = cfg.alpha if cfg.activation == Activation.LEAKY else 0.0

    def norm(name: str, channels: int) -> Norm:
        return Norm(NormState(cfg.norm, channels, cfg.norm_delta, cfg.norm_affine, f'{role}.{name}', dtype))

    layers: list[tuple[str, Layer]] = [
        ('enc0', Conv(f'{role}.enc0', cfg.input_channels, f, 7, 1, 3, PaddingMode.REFLECT, rng, std, dtype)),
        ('enc0_norm', norm('enc0_norm', f)),
        ('enc0_act', LeakyReLU(alpha)),
        ('enc1', Conv(f'{role}.enc1', f, 2 * f, 3, 2, 1, PaddingMode.ZERO, rng, std, dtype)),
        ('enc1_norm', norm('enc1_norm', 2 * f)),
        ('enc1_act', LeakyReLU(alpha)),
        ('enc2', Conv(f'{role}.enc2', 2 * f, 4 * f, 3, 2, 1, PaddingMode.ZERO, rng, std, dtype)),
        ('enc2_norm', norm('enc2_norm', 4 * f)),
        ('enc2_act', LeakyReLU(alpha)),
    ]
    for i in range(cfg.n_res_blocks):
        params = ResidualBlockParams(f'{role}.res{i}', 4 * f, rng, std, cfg.norm, cfg.norm_affine, cfg.norm_delta,
                                     dtype)
        layers.append((f'res{i}', ResidualBlock(params)))
    layers += [
        ('dec0', TransposeConv(f'{role}.dec0', 4 * f, 2 * f, 3, 2, 1, 1, rng, std, dtype)),
        ('dec0_norm', norm('dec0_norm', 2 * f)),
        ('dec0_act', LeakyReLU(alpha)),
        ('dec1', TransposeConv(f'{role}.dec1', 2 * f, f, 3, 2, 1, 1, rng, std, dtype)),
        ('dec1_norm', norm('dec1_norm', f)),
        ('dec1_act', LeakyReLU(alpha)),
        ('out', Conv(f'{role}.out', f, cfg.input_channels, 7, 1, 3, PaddingMode.REFLECT, rng, std, dtype)),
        ('out_act', Tanh()),
    ]
    return ModelGraph(role, layers, cfg)


def build_discriminator(cfg: DiscriminatorConfig, seed: int, role: str = 'D_N', dtype=np.float32) -> ModelGraph:
    """
    Build a patch discriminator.

    Each stage is a 4×4 stride-2 convolution with zero padding 1 followed by
    instance normalization (all stages but the first) and LeakyReLU. A single-filter
    3×3 stride-1 convolution produces the score map. No sigmoid is applied.

    The score map extent is the input extent divided by ``2^stages``; inputs whose
    extents are not divisible are rejected when the model is run.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    layers: list[tuple[str, Layer]] = []
    in_channels = cfg.input_channels
    for i, filters in enumerate(cfg.filters):
        layers.append((f'stage{i}', Conv(f'{role}.stage{i}', in_channels, filters, 4, 2, 1, PaddingMode.ZERO,
                                         rng, std, dtype)))
        if i > 0:
            state = NormState(NormMode.INSTANCE, filters, cfg.norm_delta, cfg.norm_affine, f'{role}.stage{i}_norm',
                              dtype)
            layers.append((f'stage{i}_norm', Norm(state)))
        layers.append((f'stage{i}_act', LeakyReLU(cfg.alpha)))
        in_channels = filters
    layers.append(('head', Conv(f'{role}.head', in_channels, 1, 3, 1, 1, PaddingMode.ZERO, rng, std, dtype)))
    return ModelGraph(role, layers, cfg)
