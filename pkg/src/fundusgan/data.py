# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from threading import Condition, Lock, Thread
from typing import Callable, Iterable, Iterator, Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .enums import Domain, Split
from .exceptions import DataError

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')
DEFAULT_TEST_FRACTION = 0.16
MANIFEST_NAME = 'manifest.tsv'


class ImageSample:
    """
    Decoded image.

    The data has the layout channels × height × width, type ``float32`` and values
    in [−1, 1].
    """

    def __init__(self, data: np.ndarray, path: Optional[Path] = None, domain: Optional[Domain] = None):
        self.data: np.ndarray = data
        """Pixel values (3 × height × width) in [−1, 1]."""

        self.path: Optional[Path] = path
        """Source file, or ``None`` for generated images."""

        self.domain: Optional[Domain] = domain
        """Domain tag, or ``None`` if unknown."""

    def __repr__(self):
        return f'ImageSample({self.path}, domain={self.domain}, shape={self.data.shape})'

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit values (height × width × channels) to [−1, 1] (channels × height × width)."""
    return (pixels.astype(np.float64).transpose(2, 0, 1) * 2.0 / 255.0 - 1.0).astype(np.float32)


def denormalize(data: np.ndarray) -> np.ndarray:
    """Map values in [−1, 1] (channels × height × width) to 8-bit values (height × width × channels)."""
    pixels = np.rint((data.astype(np.float64) + 1.0) * 255.0 / 2.0)
    return np.clip(pixels, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path: Union[str, Path], domain: Optional[Domain] = None) -> ImageSample:
    """
    Decode a PNG or JPEG file.

    Grayscale images are replicated to 3 channels. Palette images are converted to RGB.

    :raises DataError: If the file cannot be read or decoded, or has an unsupported channel count.
    """
    path = Path(path)
    try:
        with Image.open(path) as image:
            image.load()
            if image.mode == 'P':
                image = image.convert('RGB')
            if image.mode == 'L':
                pixels = np.repeat(np.asarray(image)[:, :, None], 3, axis=2)
            elif image.mode == 'RGB':
                pixels = np.asarray(image)
            else:
                raise DataError(f'{path}: unsupported image mode {image.mode} '
                                f'({len(image.getbands())} channels)')
    except UnidentifiedImageError as e:
        raise DataError(f'{path}: cannot decode image') from e
    except OSError as e:
        raise DataError(f'{path}: cannot read image ({e})') from e
    return ImageSample(normalize_pixels(pixels), path, domain)


def save_image(data: np.ndarray, path: Union[str, Path]) -> None:
    """
    Write an image (channels × height × width, values in [−1, 1]) as PNG.

    :raises DataError: If the file cannot be written.
    """
    try:
        Image.fromarray(denormalize(data), 'RGB').save(path, format='PNG')
    except OSError as e:
        raise DataError(f'{path}: cannot write image ({e})') from e


def resize_to(image: ImageSample, size: int) -> ImageSample:
    """
    Resize to ``size`` × ``size`` with bilinear interpolation.

    The aspect ratio is not preserved. An image already at the target size is
    returned unchanged.
    """
    if size < 1:
        raise ValueError('target size must be positive')
    if image.height == size and image.width == size:
        return image
    channels = [np.asarray(Image.fromarray(channel.astype(np.float32), 'F')
                           .resize((size, size), Image.Resampling.BILINEAR))
                for channel in image.data]
    return ImageSample(np.stack(channels).astype(np.float32), image.path, image.domain)


def stack_samples(samples: list[ImageSample]) -> np.ndarray:
    """Stack samples into a batch (batch × channels × height × width)."""
    return np.stack([s.data for s in samples]).astype(np.float32)


def grid_image(rows: list[tuple[np.ndarray, ...]]) -> np.ndarray:
    """Arrange images side by side per row and the rows top to bottom."""
    return np.concatenate([np.concatenate(row, axis=2) for row in rows], axis=1)


class ImageLoader:
    """
    Loads and resizes images, keeping decoded images in memory.

    The loader is safe to use from the prefetch thread and the training thread.
    """

    def __init__(self, size: int, cache_limit: int = 4096):
        self.size: int = size
        """Side length of the resized images."""

        self.cache_limit: int = cache_limit
        """Maximum number of cached images (0 disables caching)."""

        self._cache: dict[Path, ImageSample] = {}
        self._lock = Lock()

    def __call__(self, path: Path, domain: Optional[Domain] = None) -> ImageSample:
        with self._lock:
            cached = self._cache.get(path)
        if cached is not None:
            return ImageSample(cached.data, cached.path, domain)
        sample = resize_to(load_image(path, domain), self.size)
        with self._lock:
            if len(self._cache) < self.cache_limit:
                self._cache[path] = sample
        return sample


@dataclass(frozen=True)
class ManifestEntry:
    """File of a corpus manifest."""

    domain: Domain
    split: Split
    relpath: str
    """Path relative to the corpus root, with forward slashes."""


class CorpusManifest:
    """
    File list of a two-domain corpus with train/test assignment.

    The corpus root contains the directories ``with_artifact`` (domain M) and
    ``artifact_free`` (domain N).
    """

    def __init__(self, root: Union[str, Path], entries: list[ManifestEntry], seed: Optional[int] = None):
        self.root: Path = Path(root)
        """Corpus root directory."""

        self.entries: list[ManifestEntry] = entries
        """All files in manifest order."""

        self.seed: Optional[int] = seed
        """Seed of the split, or ``None`` if the corpus has not been split."""

        seen = set()
        for entry in entries:
            if entry.relpath in seen:
                raise DataError(f'file {entry.relpath} is listed more than once')
            seen.add(entry.relpath)

    def __repr__(self):
        counts = ', '.join(f'{d.value}/{s.value}={len(self.files(d, s))}' for d in Domain for s in Split)
        return f'CorpusManifest({self.root}, {counts})'

    def files(self, domain: Domain, split: Split = Split.TRAIN) -> list[Path]:
        """Absolute paths of the files of a domain and split."""
        return [self.root / e.relpath for e in self.entries if e.domain == domain and e.split == split]

    @classmethod
    def scan(cls, root: Union[str, Path]) -> CorpusManifest:
        """
        List all images of a corpus directory, assigned to the train split.

        :raises DataError: If the root or a domain directory does not exist.
        """
        root = Path(root)
        if not root.is_dir():
            raise DataError(f'corpus directory {root} does not exist')
        entries = []
        for domain in Domain:
            directory = root / domain.directory
            if not directory.is_dir():
                raise DataError(f'corpus directory {directory} does not exist')
            files = sorted(p for p in directory.rglob('*') if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            entries += [ManifestEntry(domain, Split.TRAIN, p.relative_to(root).as_posix()) for p in files]
        return cls(root, entries)

    def write(self, path: Union[str, Path]) -> None:
        """Write the manifest as lines ``domain<TAB>split<TAB>relative-path``."""
        lines = [f'{e.domain.value}\t{e.split.value}\t{e.relpath}\n' for e in self.entries]
        try:
            with open(path, 'w', encoding='utf-8', newline='\n') as file:
                file.writelines(lines)
        except OSError as e:
            raise DataError(f'cannot write manifest {path} ({e})') from e

    @classmethod
    def read(cls, path: Union[str, Path], root: Union[str, Path]) -> CorpusManifest:
        """
        Read a manifest file.

        :raises DataError: If the file cannot be read or a line is malformed (the line number is named).
        """
        try:
            text = Path(path).read_text(encoding='utf-8')
        except OSError as e:
            raise DataError(f'cannot read manifest {path} ({e})') from e
        entries = []
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise DataError(f'{path}, line {number}: expected 3 tab-separated fields')
            try:
                entries.append(ManifestEntry(Domain(parts[0]), Split(parts[1]), parts[2]))
            except ValueError as e:
                raise DataError(f'{path}, line {number}: {e}') from e
        return cls(root, entries)


def split_dataset(root: Union[str, Path], seed: int, test_fraction: float = DEFAULT_TEST_FRACTION,
                  manifest_path: Optional[Union[str, Path]] = None) -> CorpusManifest:
    """
    Split both domains of a corpus into train and test files.

    Each domain is shuffled independently; ``round(count × test_fraction)`` files
    go to the test split. The result only depends on the file names and the seed.

    :param root: Corpus root directory.
    :param seed: Seed of the shuffles.
    :param test_fraction: Fraction of test files, in [0, 1).
    :param manifest_path: If given, the manifest is written to this file.
    :raises DataError: If a domain has no images.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError('test fraction must be in [0, 1)')
    scanned = CorpusManifest.scan(root)
    entries = []
    for index, domain in enumerate(Domain):
        files = [e.relpath for e in scanned.entries if e.domain == domain]
        if len(files) == 0:
            raise DataError(f'domain {domain.value} ({domain.directory}) has no images')
        rng = np.random.default_rng([seed, index])
        order = rng.permutation(len(files))
        test_count = int(np.floor(len(files) * test_fraction + 0.5))
        test = set(order[:test_count].tolist())
        entries += [ManifestEntry(domain, Split.TEST if i in test else Split.TRAIN, relpath)
                    for i, relpath in enumerate(files)]

    manifest = CorpusManifest(scanned.root, entries, seed)
    if manifest_path is not None:
        manifest.write(manifest_path)
    logging.info(f'corpus split: {manifest}')
    return manifest


def pairing_order(count_m: int, count_n: int, seed: int, epoch: int) -> list[tuple[int, int]]:
    """
    Index pairs of one epoch.

    The epoch has ``max(count_m, count_n)`` steps. Each domain is visited in a
    shuffled order; the smaller domain is reshuffled every time it wraps around.
    """
    length = max(count_m, count_n)
    rng = np.random.default_rng([seed, epoch])

    def sequence(count: int) -> list[int]:
        indexes: list[int] = []
        while len(indexes) < length:
            indexes += rng.permutation(count).tolist()
        return indexes[:length]

    return list(zip(sequence(count_m), sequence(count_n)))


def unpaired_batcher(manifest: CorpusManifest, seed: int, epoch: int = 0, split: Split = Split.TRAIN,
                     loader: Optional[Callable[[Path, Domain], ImageSample]] = None
                     ) -> Iterator[tuple[ImageSample, ImageSample]]:
    """
    Stream the (M, N) sample pairs of one epoch.

    Pairs are positional only. The sequence is fully determined by the manifest,
    the seed and the epoch number.

    :raises DataError: If a domain of the split is empty.
    """
    files_m = manifest.files(Domain.M, split)
    files_n = manifest.files(Domain.N, split)
    if not files_m or not files_n:
        raise DataError(f'{split.value} split needs images in both domains')
    loader = loader if loader is not None else load_image
    for i, j in pairing_order(len(files_m), len(files_n), seed, epoch):
        yield loader(files_m[i], Domain.M), loader(files_n[j], Domain.N)


class Prefetcher:
    """
    Iterator producing the items of another iterator in a background thread.

    Up to ``depth`` items are produced ahead. Items are handed off in their original
    order; an exception raised by the producer is re-raised by :meth:`__next__`.
    """

    def __init__(self, source: Iterable, depth: int = 2):
        if depth < 1:
            raise ValueError('prefetch depth must be at least 1')
        self.depth = depth
        self.items: deque = deque()
        self.finished = False
        self.closed = False
        self.failure_reason: Optional[BaseException] = None
        self.condition = Condition(Lock())
        self.thread = Thread(target=self._produce, args=(iter(source),), daemon=True)
        self.thread.start()

    def _produce(self, source: Iterator) -> None:
        try:
            for item in source:
                with self.condition:
                    self.condition.wait_for(lambda: len(self.items) < self.depth or self.closed)
                    if self.closed:
                        return
                    self.items.append(item)
                    self.condition.notify_all()
        except BaseException as e:
            with self.condition:
                self.failure_reason = e
        with self.condition:
            self.finished = True
            self.condition.notify_all()

    def __iter__(self):
        return self

    def __next__(self):
        with self.condition:
            self.condition.wait_for(lambda: len(self.items) > 0 or self.finished)
            if self.items:
                item = self.items.popleft()
                self.condition.notify_all()
                return item
            if self.failure_reason is not None:
                raise self.failure_reason
            raise StopIteration

    def close(self) -> None:
        """Stop the producer and wait for the thread to end."""
        with self.condition:
            self.closed = True
            self.condition.notify_all()
        self.thread.join()
