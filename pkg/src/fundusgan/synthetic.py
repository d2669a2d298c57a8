# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

"""
Synthetic fundus-like corpus for experiments without a real dataset.

Clean images show a bright retinal disk with an optic disc and a few dark
vessels. Artifact images add a flare blob and a vignette to a clean image.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .data import denormalize, normalize_pixels, save_image
from .enums import Domain
from .exceptions import DataError

CLEAN_DIR = 'reference_clean'
MASK_DIR = 'masks'
MASK_THRESHOLD = 4 / 255


def _quantize(rgb: np.ndarray) -> np.ndarray:
    # rgb in [0, 1], height × width × channels -> 8-bit levels in [-1, 1], channels first
    return normalize_pixels(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(coords, coords, indexing='ij')


def clean_fundus(rng: np.random.Generator, size: int) -> np.ndarray:
    """
    Generate an artifact-free fundus-like image.

    :return: Image (3 × size × size) with values on the 8-bit grid in [−1, 1].
    """
    yy, xx = _grid(size)
    r = np.hypot(yy, xx)
    color = np.array([0.75, 0.35, 0.15]) + rng.uniform(-0.05, 0.05, 3)
    shade = 1 - 0.3 * r ** 2
    disk = np.clip((0.92 - r) * size / 2, 0, 1)
    rgb = color[None, None, :] * (shade * disk)[:, :, None]

    angle = rng.uniform(0, 2 * np.pi)
    distance = rng.uniform(0.35, 0.5)
    cy, cx = distance * np.sin(angle), distance * np.cos(angle)
    disc = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12 ** 2))
    rgb += disc[:, :, None] * np.array([0.25, 0.25, 0.15])[None, None, :] * disk[:, :, None]

    for _ in range(rng.integers(4, 7)):
        theta = rng.uniform(0, 2 * np.pi)
        amplitude = rng.uniform(0.03, 0.1)
        frequency = rng.uniform(3, 8)
        along = (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        across = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
        offset = across - amplitude * np.sin(frequency * along)
        vessel = np.exp(-(offset / 0.025) ** 2) * (along > 0)
        rgb *= 1 - 0.45 * (vessel * disk)[:, :, None]

    rgb += rng.normal(0, 0.01, rgb.shape) * disk[:, :, None]
    return _quantize(np.clip(rgb, 0, 1))


def add_artifacts(clean: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Add a flare blob and a vignette to a clean image.

    :param clean: Image (3 × height × width) in [−1, 1].
    :return: Tuple of the artifact image and the boolean mask (height × width) of pixels the artifacts
        left unchanged (within 4 levels of 255).
    """
    size = clean.shape[1]
    yy, xx = _grid(size)
    r = np.hypot(yy, xx)
    rgb = (clean.transpose(1, 2, 0).astype(np.float64) + 1) / 2

    fy, fx = rng.uniform(-0.6, 0.6, 2)
    width = rng.uniform(0.25, 0.4)
    amplitude = rng.uniform(0.5, 0.8)
    flare = amplitude * np.exp(-((yy - fy) ** 2 + (xx - fx) ** 2) / (2 * width ** 2))
    rgb = rgb + flare[:, :, None] * np.array([1.0, 0.95, 0.85])[None, None, :]

    strength = rng.uniform(0.4, 0.7)
    vignette = 1 - strength * np.clip((r - 0.5) / 0.5, 0, 1) ** 2
    rgb = rgb * vignette[:, :, None]

    artifact = _quantize(np.clip(rgb, 0, 1))
    mask = np.max(np.abs(artifact - clean), axis=0) * 0.5 < MASK_THRESHOLD
    return artifact, mask


def add_gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """
    Add Gaussian noise.

    :param image: Image in [−1, 1].
    :param sigma: Standard deviation relative to the [0, 1] intensity range (e.g. 25/255).
    :return: Noisy image on the 8-bit grid in [−1, 1].
    """
    noisy = image.astype(np.float64) + rng.normal(0, 2 * sigma, image.shape)
    return normalize_pixels(denormalize(np.clip(noisy, -1, 1)))


class SyntheticCorpus:
    """Paths of a generated corpus."""

    def __init__(self, root: Path, clean_m: list[Path], masks: list[Path]):
        self.root: Path = root
        """Corpus root (usable as training corpus)."""

        self.clean_m: list[Path] = clean_m
        """Clean counterparts of the domain M images, in the same order."""

        self.masks: list[Path] = masks
        """Artifact-free masks of the domain M images, in the same order."""


def write_synthetic_corpus(root: Union[str, Path], count: int = 64, size: int = 32, seed: int = 0
                           ) -> SyntheticCorpus:
    """
    Write a toy corpus.

    Domain N gets ``count`` clean images. Domain M gets ``count`` artifact versions
    of other clean images; their clean counterparts and artifact-free masks are
    written to ``reference_clean/`` and ``masks/`` with the same file names.

    :raises DataError: If the files cannot be written.
    """
    if count < 1 or size < 8:
        raise ValueError('count must be positive and size at least 8')
    root = Path(root)
    rng = np.random.default_rng(seed)
    try:
        for directory in (Domain.M.directory, Domain.N.directory, CLEAN_DIR, MASK_DIR):
            (root / directory).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f'cannot create corpus directory {root} ({e})') from e

    clean_m, masks = [], []
    for i in range(count):
        name = f'toy{i:04d}.png'
        save_image(clean_fundus(rng, size), root / Domain.N.directory / name)

        clean = clean_fundus(rng, size)
        artifact, mask = add_artifacts(clean, rng)
        save_image(artifact, root / Domain.M.directory / name)
        save_image(clean, root / CLEAN_DIR / name)
        Image.fromarray(mask.astype(np.uint8) * 255, 'L').save(root / MASK_DIR / name, format='PNG')
        clean_m.append(root / CLEAN_DIR / name)
        masks.append(root / MASK_DIR / name)

    logging.info(f'synthetic corpus with {count} images per domain written to {root}')
    return SyntheticCorpus(root, clean_m, masks)


def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Read a mask written by :func:`write_synthetic_corpus`."""
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert('L')) > 127
    except OSError as e:
        raise DataError(f'{path}: cannot read mask ({e})') from e
