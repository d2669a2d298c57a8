# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.ndimage
import scipy.special
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from ._common.container import ContainerParser, encode_container
from .data import ImageSample, load_image
from .enums import BlockLabel
from .exceptions import CheckpointError, DataError, MetricError

NIQE_ROLE = 'NIQE'
FEATURES_PER_SCALE = 18

_gamma_range = np.arange(0.2, 10, 0.001)
_gamma_ratio = scipy.special.gamma(2.0 / _gamma_range) ** 2 / (
        scipy.special.gamma(1.0 / _gamma_range) * scipy.special.gamma(3.0 / _gamma_range))


# --- luminance and MSCN -----------------------------------------------------

def to_luminance(image: Union[ImageSample, np.ndarray]) -> np.ndarray:
    """
    Get the luminance on the 0–255 scale.

    3-channel images (values in [−1, 1]) are converted with the Rec. 601 weights.
    2-D arrays are taken as luminance on the 0–255 scale already.
    """
    data = image.data if isinstance(image, ImageSample) else np.asarray(image)
    if data.ndim == 2:
        return data.astype(np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise MetricError(f'expected a 2-D luminance image or a 3-channel image, got shape {data.shape}')
    rgb = (data.astype(np.float64) + 1.0) * 127.5
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


@dataclass
class MscnConfig:
    """MSCN coefficient parameters."""

    half_extent: int = 3
    """Half extent of the Gaussian window (7 × 7 for 3)."""

    sigma: float = 7 / 6
    """Standard deviation of the Gaussian window."""

    epsilon: float = 1.0
    """Stabilizing constant of the divisive normalization."""

    @property
    def window_size(self) -> int:
        return 2 * self.half_extent + 1


def gaussian_window(half_extent: int, sigma: float) -> np.ndarray:
    """1-D Gaussian weights of length ``2·half_extent + 1`` summing to 1."""
    offsets = np.arange(-half_extent, half_extent + 1, dtype=np.float64)
    weights = np.exp(-0.5 * offsets ** 2 / sigma ** 2)
    return weights / weights.sum()


class MscnField:
    """Mean subtracted contrast normalized coefficients with their local statistics."""

    def __init__(self, coefficients: np.ndarray, mu: np.ndarray, sigma: np.ndarray, config: MscnConfig):
        self.coefficients: np.ndarray = coefficients
        """MSCN coefficients ``(I − μ) / (σ + ε)``."""

        self.mu: np.ndarray = mu
        """Local weighted mean."""

        self.sigma: np.ndarray = sigma
        """Local weighted deviation (non-negative)."""

        self.config: MscnConfig = config

    @property
    def window(self) -> np.ndarray:
        """2-D window weights."""
        w = gaussian_window(self.config.half_extent, self.config.sigma)
        return np.outer(w, w)


def mscn(luminance: np.ndarray, config: Optional[MscnConfig] = None) -> MscnField:
    """
    Compute MSCN coefficients.

    The local mean and deviation use a circularly symmetric Gaussian window,
    applied separably with symmetric boundary extension.

    :param luminance: 2-D luminance on the 0–255 scale.
    :raises MetricError: If the image is not larger than the window.
    """
    config = config or MscnConfig()
    image = np.asarray(luminance, dtype=np.float64)
    if image.ndim != 2:
        raise MetricError(f'MSCN needs a 2-D image, got shape {image.shape}')
    if min(image.shape) <= config.window_size:
        raise MetricError(f'image {image.shape} must be larger than the {config.window_size}×{config.window_size} '
                          f'window')

    weights = gaussian_window(config.half_extent, config.sigma)

    def smooth(x: np.ndarray) -> np.ndarray:
        y = scipy.ndimage.correlate1d(x, weights, axis=0, mode='reflect')
        return scipy.ndimage.correlate1d(y, weights, axis=1, mode='reflect')

    mu = smooth(image)
    sigma = np.sqrt(np.abs(smooth(image * image) - mu * mu))
    coefficients = (image - mu) / (sigma + config.epsilon)
    return MscnField(coefficients, mu, sigma, config)


# --- PIQE ---------------------------------------------------------------------

@dataclass
class PiqeConfig:
    """Block classification parameters."""

    block_size: int = 16
    activity_threshold: float = 0.1
    """A block is spatially active if the variance of its MSCN coefficients exceeds this value."""

    impaired_threshold: float = 0.1
    """An edge segment with a variance below this value indicates a blocking artifact."""

    segment_length: int = 6
    """Length of the edge segments."""

    noise_ratio: float = 2.0
    """
    A block is noisy if the larger of the block variance and the center-region variance
    is at most this multiple of the smaller one (activity spread over the whole block).
    """

    mscn: MscnConfig = field(default_factory=MscnConfig)


class PiqeReport:
    """Result of a PIQE evaluation."""

    def __init__(self, score: float, labels: np.ndarray, artifact_blocks: np.ndarray, noise_blocks: np.ndarray,
                 block_scores: np.ndarray, block_size: int, image_shape: tuple[int, int]):
        self.score: float = score
        """Quality score in [0, 100]; lower is better."""

        self.labels: np.ndarray = labels
        """Label of every block (values of :class:`BlockLabel`); blocking artifacts take precedence over noise."""

        self.artifact_blocks: np.ndarray = artifact_blocks
        """Boolean grid of blocks with a blocking artifact."""

        self.noise_blocks: np.ndarray = noise_blocks
        """Boolean grid of blocks with Gaussian noise."""

        self.block_scores: np.ndarray = block_scores
        """Distortion score in [0, 100] of every distorted block; 0 for all other blocks."""

        self.block_size: int = block_size
        self.image_shape: tuple[int, int] = image_shape

    def __repr__(self):
        return f'PiqeReport(score={self.score:.3f}, active={self.active_count}, distorted={self.distorted_count})'

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.labels != BlockLabel.INACTIVE))

    @property
    def distorted_count(self) -> int:
        return int(np.count_nonzero(self.artifact_blocks | self.noise_blocks))

    @property
    def no_activity(self) -> bool:
        """Boolean indicating that no block is spatially active and the score is the fallback value 100."""
        return self.active_count == 0

    def _pixel_mask(self, blocks: np.ndarray) -> np.ndarray:
        mask = np.zeros(self.image_shape, dtype=bool)
        expanded = np.kron(blocks, np.ones((self.block_size, self.block_size), dtype=bool))
        mask[:expanded.shape[0], :expanded.shape[1]] = expanded
        return mask

    @property
    def activity_mask(self) -> np.ndarray:
        """Pixel mask of spatially active blocks."""
        return self._pixel_mask(self.labels != BlockLabel.INACTIVE)

    @property
    def artifact_mask(self) -> np.ndarray:
        """Pixel mask of blocks with blocking artifacts."""
        return self._pixel_mask(self.artifact_blocks)

    @property
    def noise_mask(self) -> np.ndarray:
        """Pixel mask of blocks with Gaussian noise."""
        return self._pixel_mask(self.noise_blocks)


def _is_impaired(block: np.ndarray, config: PiqeConfig) -> bool:
    edges = (block[0, :], block[:, -1], block[-1, :], block[:, 0])
    for edge in edges:
        segments = sliding_window_view(edge, config.segment_length)
        if np.any(np.var(segments, axis=1, ddof=1) < config.impaired_threshold):
            return True
    return False


def _is_noisy(block: np.ndarray, variance: float, config: PiqeConfig) -> bool:
    quarter = block.shape[0] // 4
    center = block[quarter:block.shape[0] - quarter, quarter:block.shape[1] - quarter]
    center_variance = float(np.var(center, ddof=1))
    low, high = sorted((variance, center_variance))
    return low > 0 and high <= config.noise_ratio * low


def _block_score(variance: float) -> float:
    # MSCN coefficients of natural content have unit variance
    return 100.0 * min(variance, 1.0)


def piqe(image: Union[ImageSample, np.ndarray], config: Optional[PiqeConfig] = None) -> PiqeReport:
    """
    Perception based image quality evaluation.

    The MSCN coefficients are split into non-overlapping blocks (partial blocks at
    the right and bottom edge are discarded). An active block is distorted if one of
    its edges has a segment with a variance below ``impaired_threshold`` (blocking
    artifact) or if its variance and the variance of its center region (the middle
    half in each direction) are within a factor ``noise_ratio`` of each other
    (Gaussian noise). A distorted block scores its MSCN variance, clipped to 1, times
    100. The image score is the average score of the distorted blocks.

    An image without any active block scores 100 and is flagged with
    :attr:`PiqeReport.no_activity`; an image whose active blocks are all undistorted
    scores 0.

    :param image: 3-channel image in [−1, 1] or 2-D luminance (0–255).
    :raises MetricError: If the image is smaller than one block.
    """
    config = config or PiqeConfig()
    luminance = to_luminance(image)
    size = config.block_size
    rows, columns = luminance.shape[0] // size, luminance.shape[1] // size
    if rows == 0 or columns == 0:
        raise MetricError(f'image {luminance.shape} is smaller than a {size}×{size} block')
    coefficients = mscn(luminance, config.mscn).coefficients

    labels = np.full((rows, columns), BlockLabel.INACTIVE, dtype=np.int8)
    artifact_blocks = np.zeros((rows, columns), dtype=bool)
    noise_blocks = np.zeros((rows, columns), dtype=bool)
    block_scores = np.zeros((rows, columns))

    for i in range(rows):
        for j in range(columns):
            block = coefficients[i * size:(i + 1) * size, j * size:(j + 1) * size]
            variance = float(np.var(block, ddof=1))
            if not variance > config.activity_threshold:
                continue
            impaired = _is_impaired(block, config)
            noisy = _is_noisy(block, variance, config)
            artifact_blocks[i, j] = impaired
            noise_blocks[i, j] = noisy
            if impaired:
                labels[i, j] = BlockLabel.BLOCKING_ARTIFACT
            elif noisy:
                labels[i, j] = BlockLabel.GAUSSIAN_NOISE
            else:
                labels[i, j] = BlockLabel.UNDISTORTED
            if impaired or noisy:
                block_scores[i, j] = _block_score(variance)

    distorted = artifact_blocks | noise_blocks
    if not np.any(labels != BlockLabel.INACTIVE):
        score = 100.0
    elif not distorted.any():
        score = 0.0
    else:
        score = float(block_scores[distorted].mean())
    return PiqeReport(score, labels, artifact_blocks, noise_blocks, block_scores, size, luminance.shape)


# --- NIQE ---------------------------------------------------------------------

@dataclass
class NiqeConfig:
    """Feature extraction and model fitting parameters."""

    patch_size: int = 96
    """Patch side length at the finest scale."""

    scales: int = 2
    """Number of scales; each further scale halves the image."""

    sharpness_percentile: float = 75.0
    """Fitting keeps the patches of an image whose sharpness is at least this percentile of its patches."""

    ridge: float = 1e-6
    """Ridge term added to the fitted covariance."""

    min_images: int = 10
    """Minimum number of images of a fitting corpus."""

    mscn: MscnConfig = field(default_factory=MscnConfig)

    @property
    def feature_count(self) -> int:
        return FEATURES_PER_SCALE * self.scales

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> NiqeConfig:
        values = dict(values)
        values['mscn'] = MscnConfig(**values['mscn'])
        return cls(**values)


def ggd_features(x: np.ndarray) -> tuple[float, float]:
    """Shape and variance of a zero-mean generalized Gaussian fitted by moment matching."""
    variance = float(np.mean(x * x))
    mean_abs = float(np.mean(np.abs(x)))
    if mean_abs == 0:
        return float(_gamma_range[0]), 0.0
    rho = variance / mean_abs ** 2
    index = int(np.argmin(np.abs(1.0 / _gamma_ratio - rho)))
    return float(_gamma_range[index]), variance


def aggd_features(x: np.ndarray) -> tuple[float, float, float, float]:
    """Shape, mean, left scale and right scale of an asymmetric generalized Gaussian fit."""
    x = x.reshape(-1)
    squares = x * x
    left = squares[x < 0]
    right = squares[x >= 0]
    left_root = math.sqrt(float(np.mean(left))) if left.size else 0.0
    right_root = math.sqrt(float(np.mean(right))) if right.size else 0.0
    mean_square = float(np.mean(squares))
    if mean_square == 0 or left_root == 0 or right_root == 0:
        return float(_gamma_range[0]), 0.0, left_root, right_root

    gamma_hat = left_root / right_root
    r_hat = float(np.mean(np.abs(x))) ** 2 / mean_square
    r_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    alpha = float(_gamma_range[int(np.argmin((_gamma_ratio - r_norm) ** 2))])

    g1 = scipy.special.gamma(1.0 / alpha)
    g2 = scipy.special.gamma(2.0 / alpha)
    g3 = scipy.special.gamma(3.0 / alpha)
    ratio = math.sqrt(g1 / g3)
    bl = ratio * left_root
    br = ratio * right_root
    return alpha, (br - bl) * g2 / g1, bl, br


def patch_features(patch: np.ndarray) -> np.ndarray:
    """The 18 natural scene statistics of an MSCN patch."""
    alpha, variance = ggd_features(patch)
    features = [alpha, variance]
    shifted = (np.roll(patch, 1, axis=1),
               np.roll(patch, 1, axis=0),
               np.roll(np.roll(patch, 1, axis=0), 1, axis=1),
               np.roll(np.roll(patch, 1, axis=0), -1, axis=1))
    for s in shifted:
        features += aggd_features(s * patch)
    return np.array(features)


def _downscale(luminance: np.ndarray) -> np.ndarray:
    h, w = luminance.shape
    image = Image.fromarray(luminance.astype(np.float32), 'F')
    return np.asarray(image.resize((w // 2, h // 2), Image.Resampling.BICUBIC), dtype=np.float64)


def image_features(luminance: np.ndarray, config: NiqeConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Extract the patch features of an image at all scales.

    :return: Tuple of the features (patches × feature count) and the sharpness of each patch
        (mean local deviation at the finest scale).
    :raises MetricError: If the image does not contain a single patch.
    """
    h, w = luminance.shape
    p = config.patch_size
    if h < p or w < p:
        raise MetricError(f'image {luminance.shape} is smaller than the {p}×{p} NIQE patch')
    if p % (2 ** (config.scales - 1)) != 0:
        raise MetricError(f'patch size {p} cannot be halved {config.scales - 1} times')

    rows, columns = h // p, w // p
    per_scale = []
    sharpness = None
    image = luminance
    for scale in range(config.scales):
        size = p >> scale
        field_ = mscn(image, config.mscn)
        blocks = [(i * size, j * size) for i in range(rows) for j in range(columns)]
        per_scale.append(np.array([patch_features(field_.coefficients[y:y + size, x:x + size])
                                   for y, x in blocks]))
        if scale == 0:
            sharpness = np.array([field_.sigma[y:y + size, x:x + size].mean() for y, x in blocks])
        if scale + 1 < config.scales:
            image = _downscale(image)
    return np.hstack(per_scale), sharpness


class NiqeModel:
    """Multivariate Gaussian model of natural scene statistics of a pristine corpus."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray, config: NiqeConfig, fingerprint: str,
                 image_count: int = 0):
        self.mean: np.ndarray = mean
        """Feature mean vector ν."""

        self.cov: np.ndarray = cov
        """Feature covariance Σ (symmetric, ridge-regularized)."""

        self.config: NiqeConfig = config
        """Extraction configuration the model was fitted with."""

        self.fingerprint: str = fingerprint
        """SHA-256 of the configuration and the corpus images."""

        self.image_count: int = image_count
        """Number of images of the fitting corpus."""

    def __repr__(self):
        return f'NiqeModel(features={self.mean.size}, images={self.image_count}, fingerprint={self.fingerprint[:12]})'


def fit_niqe_model(corpus: Iterable[Union[ImageSample, np.ndarray]], config: Optional[NiqeConfig] = None
                   ) -> NiqeModel:
    """
    Fit a NIQE model to a corpus of artifact-free images.

    :raises MetricError: If the corpus has fewer than ``config.min_images`` images, or no image has any
        structure (all-constant images).
    """
    config = config or NiqeConfig()
    digest = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode('utf-8'))
    selected = []
    count = 0
    for image in corpus:
        luminance = to_luminance(image)
        digest.update(np.ascontiguousarray(luminance).tobytes())
        count += 1
        features, sharpness = image_features(luminance, config)
        if sharpness.max() > 0:
            threshold = np.percentile(sharpness, config.sharpness_percentile)
            selected.append(features[sharpness >= threshold])

    if count < config.min_images:
        raise MetricError(f'NIQE fitting needs at least {config.min_images} images, got {count}')
    if not selected:
        raise MetricError('degenerate NIQE corpus: no image has any structure')
    features = np.vstack(selected)
    if features.shape[0] < 2:
        raise MetricError('degenerate NIQE corpus: fewer than 2 sharp patches')
    if not np.all(np.isfinite(features)):
        raise MetricError('NIQE features are not finite')

    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False) + config.ridge * np.eye(features.shape[1])
    cov = (cov + cov.T) / 2
    model = NiqeModel(mean, cov, config, digest.hexdigest(), count)
    logging.info(f'fitted {model} from {features.shape[0]} patches')
    return model


def niqe_distance(mean1: np.ndarray, cov1: np.ndarray, mean2: np.ndarray, cov2: np.ndarray) -> float:
    """
    Distance ``√(dᵀ((Σ₁ + Σ₂)/2)⁻¹d)`` with ``d = ν₁ − ν₂``.

    :raises MetricError: If the pooled covariance is singular.
    """
    d = mean1 - mean2
    if not np.any(d):
        return 0.0
    pooled = (cov1 + cov2) / 2
    try:
        factor = scipy.linalg.cho_factor(pooled)
        solved = scipy.linalg.cho_solve(factor, d)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise MetricError('pooled NIQE covariance is singular') from e
    value = float(d @ solved)
    return math.sqrt(max(value, 0.0))


def niqe_score(image: Union[ImageSample, np.ndarray], model: NiqeModel) -> float:
    """
    Score an image against a NIQE model; lower is better.

    All patches of the image are used. An image with a single patch has a zero covariance.

    :raises MetricError: If the image is too small or the pooled covariance is singular.
    """
    features, _ = image_features(to_luminance(image), model.config)
    if not np.all(np.isfinite(features)):
        raise MetricError('NIQE features are not finite')
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False) if features.shape[0] >= 2 else np.zeros_like(model.cov)
    return niqe_distance(model.mean, model.cov, mean, cov)


def save_niqe_model(model: NiqeModel, path: Union[str, Path]) -> None:
    """Write a NIQE model in the checkpoint container format with role tag ``NIQE``."""
    meta = {'config': model.config.to_dict(), 'fingerprint': model.fingerprint, 'image_count': model.image_count}
    data = encode_container([NIQE_ROLE], meta, {'mean': model.mean, 'cov': model.cov})
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise CheckpointError(f'cannot write NIQE model {path}: {e.strerror}') from e


def load_niqe_model(path: Union[str, Path]) -> NiqeModel:
    """
    Read a NIQE model.

    :raises CheckpointError: If the file is malformed or does not hold a NIQE model.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f'cannot read NIQE model {path}: {e.strerror}') from e
    parser = ContainerParser.parse_bytes(data)
    if parser.roles != [NIQE_ROLE] or 'mean' not in parser.tensors or 'cov' not in parser.tensors:
        raise CheckpointError(f'{path} does not contain a NIQE model')
    try:
        config = NiqeConfig.from_dict(parser.meta['config'])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f'{path}: invalid NIQE model configuration ({e!r})') from e
    mean, cov = parser.tensors['mean'], parser.tensors['cov']
    if mean.shape != (config.feature_count,) or cov.shape != (config.feature_count, config.feature_count):
        raise CheckpointError(f'{path}: NIQE model shapes do not match the feature count {config.feature_count}')
    return NiqeModel(mean, cov, config, parser.meta.get('fingerprint', ''), parser.meta.get('image_count', 0))


# --- corpus scoring -------------------------------------------------------------

SCORE_COLUMNS = ['image', 'group', 'niqe', 'piqe', 'error']
SUMMARY_COLUMNS = ['group', 'count', 'failed', 'niqe_mean', 'niqe_median', 'piqe_mean', 'piqe_median']


class ScoreRow:
    """Scores of one image."""

    def __init__(self, image: str, group: str, niqe: Optional[float] = None, piqe: Optional[float] = None,
                 error: str = ''):
        self.image = image
        self.group = group
        self.niqe = niqe
        self.piqe = piqe
        self.error = error
        """Error message if the image could not be scored, empty otherwise."""

    def cells(self) -> list[str]:
        def fmt(value: Optional[float]) -> str:
            return '' if value is None else repr(value)
        return [self.image, self.group, fmt(self.niqe), fmt(self.piqe), self.error]


def summarize(rows: list[ScoreRow]) -> list[list[str]]:
    """Count, mean and median of both metrics per group, in order of first appearance."""
    groups: dict[str, list[ScoreRow]] = {}
    for row in rows:
        groups.setdefault(row.group, []).append(row)
    table = []
    for group, members in groups.items():
        ok = [r for r in members if not r.error]
        niqe = [r.niqe for r in ok if r.niqe is not None]
        piqe = [r.piqe for r in ok if r.piqe is not None]
        table.append([group, str(len(members)), str(len(members) - len(ok)),
                      repr(float(np.mean(niqe))) if niqe else '', repr(float(np.median(niqe))) if niqe else '',
                      repr(float(np.mean(piqe))) if piqe else '', repr(float(np.median(piqe))) if piqe else ''])
    return table


def summary_path(out_path: Union[str, Path]) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + '-summary.csv')


def score_corpus(images: Iterable[tuple[Union[str, Path], str]], model: Optional[NiqeModel],
                 out_path: Union[str, Path], piqe_config: Optional[PiqeConfig] = None) -> list[ScoreRow]:
    """
    Score images and write the results.

    Writes a CSV with the columns ``image, group, niqe, piqe, error`` in input order
    and a summary CSV (``<name>-summary.csv``) with count, mean and median per group.
    An image that cannot be read or scored gets a row with an error message; the
    run continues.

    :param images: Image paths with their group (``input`` or ``output``).
    :param model: NIQE model, or ``None`` to skip NIQE.
    :param out_path: Destination of the per-image CSV.
    :return: The rows written.
    """
    rows = []
    for path, group in images:
        path = Path(path)
        try:
            sample = load_image(path)
            niqe = niqe_score(sample, model) if model is not None else None
            rows.append(ScoreRow(path.as_posix(), group, niqe, piqe(sample, piqe_config).score))
        except (DataError, MetricError) as e:
            logging.warning(f'cannot score {path}: {e}')
            rows.append(ScoreRow(path.as_posix(), group, error=str(e)))

    with open(out_path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(SCORE_COLUMNS)
        writer.writerows(row.cells() for row in rows)
    with open(summary_path(out_path), 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(summarize(rows))
    return rows
