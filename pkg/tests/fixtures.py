# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from pathlib import Path
from typing import Callable

import numpy as np

from fundusgan import DiscriminatorConfig, GeneratorConfig, Tensor, TrainConfig, elementwise, reduce
from fundusgan.data import save_image

GRADIENT_SEEDS = (0, 1, 2, 3, 4)
FD_STEP = 1e-4
FD_TOLERANCE = 1e-4


def tiny_generator_config(image_size: int = 16) -> GeneratorConfig:
    return GeneratorConfig(base_filters=2, n_res_blocks=1, image_size=image_size)


def tiny_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(filters=(2, 4))


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(epochs=1, buffer_size=4, log_every=1, checkpoint_every=1, sample_count=2,
                  generator=tiny_generator_config(), discriminator=tiny_discriminator_config())
    values.update(overrides)
    return TrainConfig(**values)


def random_tensor(rng: np.random.Generator, shape: tuple[int, ...], requires_grad: bool = True,
                  scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=requires_grad, dtype=np.float64)


def projection(y: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``Σ y·r`` turning any output into a loss with a non-trivial gradient."""
    return reduce('sum', elementwise('mul', y, Tensor(weights, dtype=np.float64)))


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest elementwise ``|a − b| / max(|a|, |b|, 1e−8)``."""
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), 1e-8)
    return float(np.max(np.abs(actual - expected) / scale))


def random_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random image on the 8-bit grid in [−1, 1] (3 × size × size)."""
    pixels = rng.integers(0, 256, (size, size, 3)).astype(np.float64)
    return (pixels.transpose(2, 0, 1) * 2.0 / 255.0 - 1.0).astype(np.float32)


def smooth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth structured image (sum of random sinusoids) in [−1, 1], quantized to 8 bits."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    value = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.05, 0.3, 2)
        value += np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    value = value / 4 * 0.8
    pixels = np.clip(np.rint((value + 1) * 127.5), 0, 255)
    return np.repeat(pixels[None] * 2.0 / 255.0 - 1.0, 3, axis=0).astype(np.float32)


def write_images(directory: Path, count: int, size: int, seed: int,
                 generate: Callable[[np.random.Generator, int], np.ndarray] = random_image) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = directory / f'img{i:03d}.png'
        save_image(generate(rng, size), path)
        paths.append(path)
    return paths
