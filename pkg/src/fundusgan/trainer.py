# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusManifest, ImageLoader, Prefetcher, grid_image, save_image, stack_samples, \
    unpaired_batcher
from .enums import Domain, OptimizerKind, Split
from .exceptions import ConfigError, DataError, DivergenceError
from .models import DiscriminatorConfig, GeneratorConfig, ModelGraph, build_discriminator, build_generator
from .ops import elementwise, reduce
from .optim import AdamState, DEFAULT_BETA2, DEFAULT_DELTA, DEFAULT_BETA1, DEFAULT_LEARNING_RATE, adam_step, sgd_step
from .tensor import Tensor, backward, no_grad


@dataclass
class TrainConfig:
    """Training schedule and objective weights."""

    epochs: int = 200
    """Number of passes over the larger domain."""

    batch_size: int = 1
    """Number of (M, N) pairs per step."""

    lr: float = DEFAULT_LEARNING_RATE
    """Learning rate of all four networks."""

    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    delta: float = DEFAULT_DELTA

    lambda_cyc: float = 10.0
    """Weight of the cycle-consistency penalty."""

    lambda_id: float = 5.0
    """Weight of the identity penalty."""

    seed: int = 0
    """Seed of weight initialization, data order and fake image buffers."""

    buffer_size: int = 50
    """Capacity of each fake image buffer; 0 disables the buffers."""

    optimizer: OptimizerKind = OptimizerKind.ADAM

    max_steps: int = 0
    """Stop after this many steps (0 for no limit)."""

    checkpoint_every: int = 10
    """Checkpoint interval in epochs."""

    log_every: int = 10
    """Log interval in steps."""

    sample_count: int = 4
    """Number of images rendered into each sample grid."""

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def validate(self) -> None:
        """
        Check the value ranges.

        :raises ConfigError: If a value is out of range; the key is named.
        """
        if self.epochs < 1:
            raise ConfigError('epochs must be at least 1', key='epochs')
        if self.batch_size < 1:
            raise ConfigError('batch size must be at least 1', key='batch_size')
        if self.lambda_cyc < 0:
            raise ConfigError('cycle weight must not be negative', key='lambda_cyc')
        if self.lambda_id < 0:
            raise ConfigError('identity weight must not be negative', key='lambda_id')
        if self.lr < 0:
            raise ConfigError('learning rate must not be negative', key='lr')
        if not (0 <= self.beta1 < 1):
            raise ConfigError('beta1 must be in [0, 1)', key='beta1')
        if not (0 <= self.beta2 < 1):
            raise ConfigError('beta2 must be in [0, 1)', key='beta2')
        if self.buffer_size < 0:
            raise ConfigError('buffer size must not be negative', key='buffer_size')
        if self.max_steps < 0:
            raise ConfigError('max steps must not be negative', key='max_steps')
        if self.checkpoint_every < 1:
            raise ConfigError('checkpoint interval must be at least 1', key='checkpoint_every')
        if self.log_every < 1:
            raise ConfigError('log interval must be at least 1', key='log_every')

    def to_dict(self) -> dict:
        values = {f.name: getattr(self, f.name) for f in fields(self)
                  if f.name not in ('generator', 'discriminator', 'optimizer')}
        values['optimizer'] = self.optimizer.value
        return values


@dataclass
class LossRecord:
    """Loss scalars of one training step."""

    step: int = 0
    epoch: int = 0
    adv_d_m: float = math.nan
    adv_d_n: float = math.nan
    adv_g_m: float = math.nan
    adv_g_n: float = math.nan
    cycle_m: float = math.nan
    """Cycle loss M → N → M."""
    cycle_n: float = math.nan
    """Cycle loss N → M → N."""
    identity_m: float = math.nan
    """Identity loss of ``G_M`` on domain M images."""
    identity_n: float = math.nan
    """Identity loss of ``G_N`` on domain N images."""

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch)] + [repr(v) for v in self.losses().values()]

    def losses(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if k not in ('step', 'epoch')}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.losses().values())

    def __str__(self):
        return f'step {self.step} epoch {self.epoch} ' + ' '.join(f'{k}={v:.5f}' for k, v in self.losses().items())


class FakeImageBuffer:
    """
    History of generated images fed to a discriminator.

    While the buffer is not full, fresh images are used and stored. Once full, each
    image is, with probability 0.5, replaced by a randomly chosen stored image, and
    the fresh image takes its place in the buffer. A capacity of 0 disables the buffer.

    :meth:`draw` selects the images for a discriminator step; :meth:`push` updates
    the buffer after the step.
    """

    def __init__(self, capacity: int, seed: Union[int, Sequence[int]]):
        if capacity < 0:
            raise ValueError('buffer capacity must not be negative')
        self.capacity: int = capacity
        """Maximum number of stored images."""

        self.images: list[np.ndarray] = []
        """Stored images (channels × height × width)."""

        self._rng = np.random.default_rng(seed)
        self._pending: list[Optional[int]] = []

    def __len__(self):
        return len(self.images)

    def draw(self, fresh: np.ndarray) -> np.ndarray:
        """
        Select the images for the discriminator step.

        :param fresh: Batch of freshly generated images.
        :return: Batch of the same shape mixing fresh and stored images.
        """
        self._pending = []
        if self.capacity == 0:
            return fresh
        result = fresh.copy()
        free = self.capacity - len(self.images)
        for i in range(fresh.shape[0]):
            if free > 0:
                free -= 1
                self._pending.append(None)
            elif self._rng.random() < 0.5:
                index = int(self._rng.integers(len(self.images)))
                result[i] = self.images[index]
                self._pending.append(index)
            else:
                self._pending.append(-1)
        return result

    def push(self, fresh: np.ndarray) -> None:
        """Store the fresh images according to the preceding :meth:`draw`."""
        if self.capacity == 0:
            return
        for image, slot in zip(fresh, self._pending):
            if slot is None:
                self.images.append(image.copy())
            elif slot >= 0:
                self.images[slot] = image.copy()
        self._pending = []


def fake_image_buffers(capacity: int, seed: int, step: int) -> tuple[FakeImageBuffer, FakeImageBuffer]:
    """
    Create the empty buffers for the discriminators of domain M and N.

    Buffer contents are not part of a checkpoint: a resumed run starts with empty
    buffers whose random streams are derived from the seed and the resume step.
    """
    return FakeImageBuffer(capacity, (seed, 10, step)), FakeImageBuffer(capacity, (seed, 11, step))


def lsgan_loss(scores: Tensor, real: bool) -> Tensor:
    """
    Least-squares adversarial loss.

    Mean over all score map elements of ``(label − score)²`` with label 1 for real
    and 0 for fake.
    """
    diff = elementwise('sub', scores, 1.0) if real else scores
    return reduce('mean', elementwise('square', diff))


def cycle_loss(x: Tensor, x_reconstructed: Tensor) -> Tensor:
    """
    Mean absolute difference between an image batch and its reconstruction.

    :raises ShapeError: If the shapes differ.
    """
    return reduce('mean', elementwise('abs', elementwise('sub', x_reconstructed, x)))


def identity_loss(g: ModelGraph, y: Tensor) -> Tensor:
    """Mean absolute difference ``|g(y) − y|`` for images ``y`` of the generator's output domain."""
    return cycle_loss(y, g(y))


class CycleGanNets:
    """The two generators and two discriminators."""

    def __init__(self, g_m: ModelGraph, g_n: ModelGraph, d_m: ModelGraph, d_n: ModelGraph):
        self.g_m: ModelGraph = g_m
        """Generator translating domain N to domain M (adds artifacts)."""

        self.g_n: ModelGraph = g_n
        """Generator translating domain M to domain N (removes artifacts)."""

        self.d_m: ModelGraph = d_m
        """Discriminator judging domain M images."""

        self.d_n: ModelGraph = d_n
        """Discriminator judging domain N images."""

    @classmethod
    def build(cls, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int,
              dtype=np.float32) -> CycleGanNets:
        return cls(build_generator(gen_cfg, seed, 'G_M', dtype),
                   build_generator(gen_cfg, seed + 1, 'G_N', dtype),
                   build_discriminator(disc_cfg, seed + 2, 'D_M', dtype),
                   build_discriminator(disc_cfg, seed + 3, 'D_N', dtype))

    def models(self) -> dict[str, ModelGraph]:
        return {'G_M': self.g_m, 'G_N': self.g_n, 'D_M': self.d_m, 'D_N': self.d_n}

    def zero_grad(self) -> None:
        for model in self.models().values():
            model.zero_grad()


class Optimizers:
    """Optimizer state of all four networks."""

    def __init__(self, cfg: TrainConfig, nets: CycleGanNets):
        self.kind: OptimizerKind = cfg.optimizer
        self.lr: float = cfg.lr
        self.states: dict[str, AdamState] = {
            role: AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.delta).initialize(model.parameters())
            for role, model in nets.models().items()
        }

    def step(self, model: ModelGraph, grads: dict[str, np.ndarray]) -> None:
        if self.kind == OptimizerKind.ADAM:
            adam_step(model.parameters(), grads, self.states[model.role])
        else:
            sgd_step(model.parameters(), grads, self.lr)


def generator_objective(m: Tensor, n: Tensor, nets: CycleGanNets, lambda_cyc: float,
                        lambda_id: float) -> tuple[Tensor, dict[str, Tensor], Tensor, Tensor]:
    """
    Combined generator loss.

    ``lsgan(D_M(G_M(n)), real) + lsgan(D_N(G_N(m)), real) + λ_cyc·(cycle M + cycle N)
    + λ_id·(identity M + identity N)``. Terms with a zero weight are evaluated without
    gradient recording and left out of the total.

    :return: Tuple of total loss, individual terms, generated domain M images and generated domain N images.
    """
    fake_n = nets.g_n(m)
    fake_m = nets.g_m(n)
    terms = {
        'adv_g_m': lsgan_loss(nets.d_m(fake_m), True),
        'adv_g_n': lsgan_loss(nets.d_n(fake_n), True),
    }
    total = terms['adv_g_m'] + terms['adv_g_n']

    if lambda_cyc > 0:
        terms['cycle_m'] = cycle_loss(m, nets.g_m(fake_n))
        terms['cycle_n'] = cycle_loss(n, nets.g_n(fake_m))
        total = total + lambda_cyc * (terms['cycle_m'] + terms['cycle_n'])
    else:
        with no_grad():
            terms['cycle_m'] = cycle_loss(m, nets.g_m(fake_n))
            terms['cycle_n'] = cycle_loss(n, nets.g_n(fake_m))

    if lambda_id > 0:
        terms['identity_m'] = identity_loss(nets.g_m, m)
        terms['identity_n'] = identity_loss(nets.g_n, n)
        total = total + lambda_id * (terms['identity_m'] + terms['identity_n'])
    else:
        with no_grad():
            terms['identity_m'] = identity_loss(nets.g_m, m)
            terms['identity_n'] = identity_loss(nets.g_n, n)

    return total, terms, fake_m, fake_n


def _record_loss(record: LossRecord, name: str, value: Tensor) -> None:
    setattr(record, name, value.item())
    if not math.isfinite(getattr(record, name)):
        raise DivergenceError(f'training diverged ({name} is not finite): {record}', record)


def train_step(m: Union[Tensor, np.ndarray], n: Union[Tensor, np.ndarray], nets: CycleGanNets,
               optimizers: Optimizers, cfg: TrainConfig, buffers: tuple[FakeImageBuffer, FakeImageBuffer],
               step: int = 0, epoch: int = 0) -> LossRecord:
    """
    Run one generator update followed by one update of each discriminator.

    The discriminators are frozen during the generator update. The generated images
    are detached before they are fed to the discriminator updates.

    :param m: Batch of domain M images.
    :param n: Batch of domain N images.
    :param buffers: Fake image buffers for ``D_M`` and ``D_N``.
    :return: Loss scalars of the step.
    :raises DivergenceError: If a loss is not finite; no parameter is updated by the failing phase.
    """
    m = m if isinstance(m, Tensor) else Tensor(m)
    n = n if isinstance(n, Tensor) else Tensor(n)
    record = LossRecord(step=step, epoch=epoch)
    buffer_m, buffer_n = buffers

    # generator update
    nets.zero_grad()
    with nets.d_m.frozen(), nets.d_n.frozen():
        total, terms, fake_m, fake_n = generator_objective(m, n, nets, cfg.lambda_cyc, cfg.lambda_id)
        for name, value in terms.items():
            _record_loss(record, name, value)
        grads = backward(total)
    optimizers.step(nets.g_m, grads)
    optimizers.step(nets.g_n, grads)

    # discriminator updates
    fake_m_data = fake_m.detach().data
    fake_n_data = fake_n.detach().data
    for disc, real, fake, buffer, field_name in ((nets.d_m, m, fake_m_data, buffer_m, 'adv_d_m'),
                                                 (nets.d_n, n, fake_n_data, buffer_n, 'adv_d_n')):
        disc.zero_grad()
        drawn = Tensor(buffer.draw(fake))
        loss = lsgan_loss(disc(real.detach()), True) + lsgan_loss(disc(drawn), False)
        _record_loss(record, field_name, loss)
        optimizers.step(disc, backward(loss))

    buffer_m.push(fake_m_data)
    buffer_n.push(fake_n_data)
    return record


class TrainResult:
    """Outcome of a training run."""

    def __init__(self, checkpoint: Path, history: list[LossRecord], nets: CycleGanNets):
        self.checkpoint: Path = checkpoint
        """Path of the final checkpoint."""

        self.history: list[LossRecord] = history
        """Loss records of all steps run in this invocation."""

        self.nets: CycleGanNets = nets
        """Trained networks."""


def checkpoint_meta(cfg: TrainConfig, epoch: int, step: int) -> dict:
    return {
        'epoch': epoch,
        'step': step,
        'seed': cfg.seed,
        'generator': cfg.generator.to_dict(),
        'discriminator': cfg.discriminator.to_dict(),
        'train': cfg.to_dict(),
    }


def _batches(pairs: Iterator, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    batch = []
    for pair in pairs:
        batch.append(pair)
        if len(batch) == batch_size:
            yield stack_samples([p[0] for p in batch]), stack_samples([p[1] for p in batch])
            batch = []
    if batch:
        yield stack_samples([p[0] for p in batch]), stack_samples([p[1] for p in batch])


def render_samples(nets: CycleGanNets, manifest: CorpusManifest, loader: ImageLoader, count: int,
                   path: Path) -> None:
    """Write a grid of domain M images next to their translation to domain N."""
    files = manifest.files(Domain.M, Split.TEST) or manifest.files(Domain.M, Split.TRAIN)
    rows = []
    with no_grad():
        for file in files[:count]:
            sample = loader(file, Domain.M)
            translated = nets.g_n(Tensor(sample.data[None])).data[0]
            rows.append((sample.data, translated))
    if rows:
        save_image(grid_image(rows), path)
        logging.info(f'sample grid written to {path}')


def train(cfg: TrainConfig, manifest: CorpusManifest, out_dir: Union[str, Path],
          resume: Optional[Union[str, Path]] = None, prefetch: int = 2) -> TrainResult:
    """
    Train the two generators and two discriminators.

    One epoch is one pass over the larger domain of the train split. The loss of
    every step is appended to ``losses.csv``, a checkpoint is written every
    ``cfg.checkpoint_every`` epochs together with a sample grid, and a final
    checkpoint ``checkpoint-final.fgan`` is written at the end.

    :param cfg: Training configuration.
    :param manifest: Corpus with train/test split.
    :param out_dir: Output directory.
    :param resume: Optional checkpoint to continue from.
    :param prefetch: Number of batches decoded ahead in a background thread (0 to decode inline).
    :raises DataError: If a domain of the train split is empty.
    :raises DivergenceError: If a loss becomes non-finite.
    :raises ShapeError: If the resume checkpoint does not match the configured architecture.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    count_m = len(manifest.files(Domain.M, Split.TRAIN))
    count_n = len(manifest.files(Domain.N, Split.TRAIN))
    if count_m == 0 or count_n == 0:
        raise DataError(f'train split needs images in both domains (found {count_m} in M, {count_n} in N)')
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'samples').mkdir(exist_ok=True)

    nets = CycleGanNets.build(cfg.generator, cfg.discriminator, cfg.seed)
    optimizers = Optimizers(cfg, nets)
    steps_per_epoch = math.ceil(max(count_m, count_n) / cfg.batch_size)
    start_epoch, step = 0, 0

    if resume is not None:
        ckpt = load_checkpoint(resume)
        ckpt.load_into(nets.models())
        if cfg.optimizer == OptimizerKind.ADAM:
            for role, state in optimizers.states.items():
                ckpt.load_optimizer(role, state)
        start_epoch, step = ckpt.epoch, ckpt.step
        logging.info(f'resuming from {resume} at epoch {start_epoch}, step {step}')

    buffers = fake_image_buffers(cfg.buffer_size, cfg.seed, step)
    loader = ImageLoader(cfg.generator.image_size)
    loss_path = out_dir / 'losses.csv'
    history: list[LossRecord] = []
    final_epoch = start_epoch

    with open(loss_path, 'a' if resume is not None and loss_path.exists() else 'w', newline='',
              encoding='utf-8') as loss_file:
        writer = csv.writer(loss_file, lineterminator='\n')
        if loss_file.tell() == 0:
            writer.writerow(LossRecord.header())

        for epoch in range(start_epoch, cfg.epochs):
            skip = step - epoch * steps_per_epoch
            pairs = unpaired_batcher(manifest, cfg.seed, epoch, loader=loader)
            batches = _batches(pairs, cfg.batch_size)
            if prefetch > 0:
                batches = Prefetcher(batches, prefetch)
            completed = True
            try:
                for index, (m, n) in enumerate(batches):
                    if index < skip:
                        continue
                    if 0 < cfg.max_steps <= step:
                        completed = False
                        break
                    record = train_step(m, n, nets, optimizers, cfg, buffers, step + 1, epoch + 1)
                    step += 1
                    history.append(record)
                    writer.writerow(record.row())
                    if step % cfg.log_every == 0:
                        logging.info(str(record))
            finally:
                if isinstance(batches, Prefetcher):
                    batches.close()

            if not completed:
                break
            final_epoch = epoch + 1
            if final_epoch % cfg.checkpoint_every == 0 and final_epoch < cfg.epochs:
                path = out_dir / f'checkpoint-epoch{final_epoch:04d}.fgan'
                save_checkpoint(nets.models(), checkpoint_meta(cfg, final_epoch, step), path, optimizers.states)
                render_samples(nets, manifest, loader, cfg.sample_count,
                               out_dir / 'samples' / f'epoch{final_epoch:04d}.png')
            if 0 < cfg.max_steps <= step:
                break

    final_path = out_dir / 'checkpoint-final.fgan'
    save_checkpoint(nets.models(), checkpoint_meta(cfg, final_epoch, step), final_path, optimizers.states)
    render_samples(nets, manifest, loader, cfg.sample_count, out_dir / 'samples' / 'final.png')
    logging.info(f'training finished after {step} steps')
    return TrainResult(final_path, history, nets)
