# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from ._common.container import ContainerParser, encode_container
from .exceptions import CheckpointError, ShapeError
from .models import DiscriminatorConfig, GeneratorConfig, ModelGraph, build_discriminator, build_generator
from .optim import AdamState

ADAM_PREFIX = 'adam.'


class Checkpoint:
    """
    Contents of a checkpoint file.

    A checkpoint holds the parameters of one or more models (identified by their
    role tags), optional optimizer moments and the training metadata.
    """

    def __init__(self, roles: list[str], meta: dict[str, Any], tensors: dict[str, np.ndarray], version: int = 1):
        self.version: int = version
        """Container format version."""

        self.roles: list[str] = roles
        """Role tags of the stored models, e.g. ``G_M``, ``G_N``, ``D_M`` and ``D_N``."""

        self.meta: dict[str, Any] = meta
        """Training metadata (epoch, step, seed and configuration echo)."""

        self.tensors: dict[str, np.ndarray] = tensors
        """All stored tensors by name."""

    def __repr__(self):
        return f'Checkpoint(roles={self.roles}, tensors={len(self.tensors)})'

    @property
    def epoch(self) -> int:
        return int(self.meta.get('epoch', 0))

    @property
    def step(self) -> int:
        return int(self.meta.get('step', 0))

    @property
    def seed(self) -> int:
        return int(self.meta.get('seed', 0))

    def model_tensors(self, role: str) -> dict[str, np.ndarray]:
        """Parameter tensors of the model with the given role."""
        prefix = role + '.'
        return {name: t for name, t in self.tensors.items() if name.startswith(prefix)}

    def generator_config(self) -> GeneratorConfig:
        """Generator architecture stored in the metadata."""
        if 'generator' not in self.meta:
            raise CheckpointError('checkpoint metadata has no generator configuration')
        return GeneratorConfig.from_dict(self.meta['generator'])

    def discriminator_config(self) -> DiscriminatorConfig:
        """Discriminator architecture stored in the metadata."""
        if 'discriminator' not in self.meta:
            raise CheckpointError('checkpoint metadata has no discriminator configuration')
        return DiscriminatorConfig.from_dict(self.meta['discriminator'])

    def build_model(self, role: str, dtype=np.float32) -> ModelGraph:
        """
        Build the model with the given role from the stored architecture and load its parameters.
        """
        if role not in self.roles:
            raise CheckpointError(f'checkpoint does not contain model {role}')
        if role.startswith('G'):
            model = build_generator(self.generator_config(), 0, role, dtype)
        else:
            model = build_discriminator(self.discriminator_config(), 0, role, dtype)
        model.load_state(self.model_tensors(role))
        return model

    def load_into(self, models: Mapping[str, ModelGraph]) -> None:
        """
        Load the stored parameters into existing models.

        All models are checked before any is modified.

        :raises ShapeError: If the stored shapes do not match the models' architecture; the message lists all
            mismatching parameters.
        """
        problems = []
        for role, model in models.items():
            if role not in self.roles:
                problems.append(f'{role}: missing in checkpoint')
                continue
            stored = self.model_tensors(role)
            for name, param in model.parameters().items():
                value = stored.get(name)
                if value is None:
                    problems.append(f'{name}: missing')
                elif value.shape != param.shape:
                    problems.append(f'{name}: stored shape {value.shape}, expected {param.shape}')
        if problems:
            raise ShapeError('checkpoint does not match the configured architecture: ' + '; '.join(problems))
        for role, model in models.items():
            model.load_state({name: t.astype(model.parameters()[name].dtype, copy=False)
                              for name, t in self.model_tensors(role).items()})

    def load_optimizer(self, role: str, state: AdamState) -> bool:
        """
        Restore the Adam moments of a model.

        :return: ``True`` if the checkpoint contained moments for the role.
        """
        steps = self.meta.get('adam_steps', {})
        if role not in steps:
            return False
        v_prefix = f'{ADAM_PREFIX}v.{role}.'
        s_prefix = f'{ADAM_PREFIX}s.{role}.'
        for name, t in self.tensors.items():
            if name.startswith(v_prefix):
                state.v[name[len(f'{ADAM_PREFIX}v.'):]] = t.copy()
            elif name.startswith(s_prefix):
                state.s[name[len(f'{ADAM_PREFIX}s.'):]] = t.copy()
        state.step = int(steps[role])
        return True


def save_checkpoint(models: Mapping[str, ModelGraph], meta: Mapping[str, Any], path: Union[str, Path],
                    optimizers: Optional[Mapping[str, AdamState]] = None) -> None:
    """
    Write models and metadata to a checkpoint file.

    :param models: Models by role tag.
    :param meta: JSON-serializable training metadata.
    :param path: Destination file.
    :param optimizers: Optional Adam states by role; their moments are stored alongside the parameters.
    """
    tensors: dict[str, np.ndarray] = {}
    for model in models.values():
        tensors.update(model.state())
    meta = dict(meta)
    if optimizers:
        steps = {}
        for role, state in optimizers.items():
            for name in state.v:
                tensors[f'{ADAM_PREFIX}v.{name}'] = state.v[name]
                tensors[f'{ADAM_PREFIX}s.{name}'] = state.s[name]
            steps[role] = state.step
        meta['adam_steps'] = steps

    data = encode_container(list(models.keys()), meta, tensors)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise CheckpointError(f'cannot write checkpoint {path}: {e.strerror}') from e
    logging.info(f'checkpoint written to {path} ({len(tensors)} tensors)')


def parse_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    :raises CheckpointError: If the data is malformed, truncated, has a wrong checksum or an unknown version.
    """
    parser = ContainerParser.parse_bytes(data)
    return Checkpoint(parser.roles, parser.meta, parser.tensors, parser.version)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint file.

    Magic bytes, version, every tensor header and the checksum are validated
    before the checkpoint is returned.

    :raises CheckpointError: If the file cannot be read or is malformed.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {e.strerror}') from e
    try:
        return parse_checkpoint(data)
    except CheckpointError as e:
        logging.debug(f'rejected checkpoint {path}: {e}')
        raise
