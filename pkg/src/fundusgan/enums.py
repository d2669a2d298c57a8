# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from enum import Enum, IntEnum

import numpy as np


class Domain(Enum):
    """Image domain."""

    M = 'M'
    """Images with artifacts."""

    N = 'N'
    """Artifact-free images."""

    @property
    def directory(self) -> str:
        """Corpus subdirectory holding the images of this domain."""
        return 'with_artifact' if self is Domain.M else 'artifact_free'


class Split(Enum):
    """Dataset split."""

    TRAIN = 'train'
    TEST = 'test'


class PaddingMode(Enum):
    """Padding mode of a convolution."""

    ZERO = 'zero'
    """Pad with zeros."""

    REFLECT = 'reflect'
    """Mirror at the border without repeating the border pixel."""


class NormMode(Enum):
    """Normalization statistics mode."""

    BATCH = 'batch'
    """Statistics per channel over batch, height and width."""

    INSTANCE = 'instance'
    """Statistics per sample and channel over height and width."""


class Activation(Enum):
    """Activation function of the generator's non-residual layers."""

    LEAKY = 'leaky'
    RELU = 'relu'


class OptimizerKind(Enum):
    """Optimization algorithm used for training."""

    ADAM = 'adam'
    SGD = 'sgd'


class Direction(Enum):
    """Translation direction for inference."""

    M_TO_N = 'M->N'
    """Remove artifacts (generator ``G_N``)."""

    N_TO_M = 'N->M'
    """Add artifacts (generator ``G_M``)."""

    @property
    def generator_role(self) -> str:
        """Role tag of the generator translating in this direction."""
        return 'G_N' if self is Direction.M_TO_N else 'G_M'


class BlockLabel(IntEnum):
    """Label of a 16×16 block in a PIQE report."""

    INACTIVE = 0
    """Block is not spatially active."""

    UNDISTORTED = 1
    """Active block without detected distortion."""

    BLOCKING_ARTIFACT = 2
    """Active block with a noticeable blocking artifact."""

    GAUSSIAN_NOISE = 3
    """Active block with Gaussian noise."""


class DType(IntEnum):
    """Scalar type code used in the binary container."""

    FLOAT32 = 1
    FLOAT64 = 2

    @classmethod
    def from_numpy(cls, dtype) -> 'DType':
        """Get the code for a NumPy dtype."""
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return DType.FLOAT32
        if dtype == np.float64:
            return DType.FLOAT64
        raise ValueError(f'unsupported dtype {dtype}')

    def to_numpy(self) -> np.dtype:
        """Get the little-endian NumPy dtype for this code."""
        return np.dtype('<f4') if self == DType.FLOAT32 else np.dtype('<f8')


class ExitCode(IntEnum):
    """Exit codes of the command-line tool."""

    OK = 0
    ALL_FAILED = 1
    CONFIG_ERROR = 2
    DATA_ERROR = 3
    DIVERGENCE = 4
    SHAPE_MISMATCH = 5
