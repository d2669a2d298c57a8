# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .enums import Activation, NormMode, OptimizerKind
from .exceptions import ConfigError
from .iqa import MscnConfig, NiqeConfig, PiqeConfig
from .models import DiscriminatorConfig, GeneratorConfig, DEFAULT_ALPHA
from .optim import DEFAULT_BETA2, DEFAULT_DELTA, DEFAULT_BETA1, DEFAULT_LEARNING_RATE
from .trainer import TrainConfig

EFFECTIVE_CONFIG_NAME = 'effective-config.txt'


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True
    if lowered in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f'expected true or false, got {text!r}')


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(','))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _positive(value) -> bool:
    return value > 0


def _non_negative(value) -> bool:
    return value >= 0


def _fraction(value) -> bool:
    return 0 <= value < 1


@dataclass(frozen=True)
class ConfigKey:
    """Schema entry of a configuration key."""

    name: str
    parse: Callable[[str], Any]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    requirement: str = ''


def _choice(values: list[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in values:
            raise ValueError(f'expected one of {", ".join(values)}, got {text!r}')
        return text
    return parse


SCHEMA: list[ConfigKey] = [
    # architecture
    ConfigKey('image_size', int, 256, lambda v: v >= 4 and v % 4 == 0, 'a positive multiple of 4'),
    ConfigKey('base_filters', int, 64, _positive, 'positive'),
    ConfigKey('n_res_blocks', int, 9, _positive, 'at least 1'),
    ConfigKey('disc_filters', _parse_int_list, (64, 128, 256, 512, 512), lambda v: len(v) > 0 and min(v) > 0,
              'a comma separated list of positive filter counts'),
    ConfigKey('alpha', float, DEFAULT_ALPHA, _non_negative, 'non-negative'),
    ConfigKey('generator_norm', _choice(['instance', 'batch']), 'instance'),
    ConfigKey('generator_activation', _choice(['leaky', 'relu']), 'leaky'),
    ConfigKey('norm_affine', _parse_bool, False),
    ConfigKey('norm_delta', float, 1e-5, _positive, 'positive'),
    ConfigKey('init_std', float, 0.02, _positive, 'positive'),
    # training
    ConfigKey('epochs', int, 200, _positive, 'at least 1'),
    ConfigKey('batch_size', int, 1, _positive, 'at least 1'),
    ConfigKey('lr', float, DEFAULT_LEARNING_RATE, _non_negative, 'non-negative'),
    ConfigKey('beta1', float, DEFAULT_BETA1, _fraction, 'in [0, 1)'),
    ConfigKey('beta2', float, DEFAULT_BETA2, _fraction, 'in [0, 1)'),
    ConfigKey('adam_delta', float, DEFAULT_DELTA, _non_negative, 'non-negative'),
    ConfigKey('lambda_cyc', float, 10.0, _non_negative, 'non-negative'),
    ConfigKey('lambda_id', float, 5.0, _non_negative, 'non-negative'),
    ConfigKey('seed', int, 0, _non_negative, 'non-negative'),
    ConfigKey('buffer_size', int, 50, _non_negative, 'non-negative'),
    ConfigKey('optimizer', _choice(['adam', 'sgd']), 'adam'),
    ConfigKey('max_steps', int, 0, _non_negative, 'non-negative'),
    ConfigKey('checkpoint_every', int, 10, _positive, 'at least 1'),
    ConfigKey('log_every', int, 10, _positive, 'at least 1'),
    ConfigKey('sample_count', int, 4, _non_negative, 'non-negative'),
    # data
    ConfigKey('test_fraction', float, 0.16, _fraction, 'in [0, 1)'),
    ConfigKey('prefetch', int, 2, _non_negative, 'non-negative'),
    # quality metrics
    ConfigKey('mscn_half_extent', int, 3, _positive, 'positive'),
    ConfigKey('mscn_sigma', float, 7 / 6, _positive, 'positive'),
    ConfigKey('mscn_epsilon', float, 1.0, _positive, 'positive'),
    ConfigKey('piqe_block_size', int, 16, lambda v: v >= 8, 'at least 8'),
    ConfigKey('piqe_activity_threshold', float, 0.1, _non_negative, 'non-negative'),
    ConfigKey('piqe_impaired_threshold', float, 0.1, _non_negative, 'non-negative'),
    ConfigKey('piqe_segment_length', int, 6, lambda v: v >= 2, 'at least 2'),
    ConfigKey('piqe_noise_ratio', float, 2.0, _positive, 'positive'),
    ConfigKey('niqe_patch_size', int, 96, lambda v: v >= 8, 'at least 8'),
    ConfigKey('niqe_scales', int, 2, lambda v: 1 <= v <= 4, 'between 1 and 4'),
    ConfigKey('niqe_sharpness_percentile', float, 75.0, lambda v: 0 <= v <= 100, 'in [0, 100]'),
    ConfigKey('niqe_ridge', float, 1e-6, _positive, 'positive'),
    ConfigKey('niqe_min_images', int, 10, _positive, 'at least 1'),
]

KEYS: dict[str, ConfigKey] = {key.name: key for key in SCHEMA}

PRESETS: dict[str, dict[str, Any]] = {
    'full': {},
    'toy': {
        'image_size': 32,
        'base_filters': 16,
        'n_res_blocks': 3,
        'disc_filters': (16, 32, 64),
        'epochs': 10,
        'max_steps': 500,
        'checkpoint_every': 5,
        'log_every': 50,
        'niqe_patch_size': 16,
    },
}


class ConfigParser(object):
    """
    Parser of the line-oriented configuration format.

    Each line holds one ``key = value`` assignment. ``#`` starts a comment; blank
    lines are ignored. Every value is parsed and validated when its line is read.
    """

    @classmethod
    def parse_text(cls, text: str) -> dict[str, Any]:
        return ConfigParser(text).values

    def __init__(self, text: str):
        self.values: dict[str, Any] = {}
        self.lines: dict[str, int] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            self.parse_line(line, number)

    def parse_line(self, line: str, number: int) -> None:
        content = line.split('#', 1)[0].strip()
        if not content:
            return
        if '=' not in content:
            raise ConfigError(f'expected "key = value", got {content!r}', number)

        name, text = (part.strip() for part in content.split('=', 1))
        key = KEYS.get(name)
        if key is None:
            raise ConfigError(f'unknown key {name!r}', number, name)
        if name in self.values:
            raise ConfigError(f'key {name!r} is set more than once (first on line {self.lines[name]})', number, name)
        self.values[name] = parse_value(key, text, number)
        self.lines[name] = number


def parse_value(key: ConfigKey, text: str, line: Optional[int] = None) -> Any:
    """
    Parse and validate the value of a key.

    :raises ConfigError: If the text cannot be parsed or the value is out of range.
    """
    try:
        value = key.parse(text)
    except ValueError as e:
        raise ConfigError(f'invalid value for {key.name}: {e}', line, key.name) from e
    if key.check is not None and not key.check(value):
        raise ConfigError(f'{key.name} must be {key.requirement}, got {text}', line, key.name)
    return value


class CliConfig:
    """
    Effective configuration of a command.

    Values come from the defaults, overridden by a preset, overridden by a
    configuration file, overridden by the ``--seed`` flag.
    """

    def __init__(self, values: Optional[dict[str, Any]] = None, preset: str = 'full'):
        self.preset: str = preset
        """Name of the applied preset."""

        self.values: dict[str, Any] = {key.name: key.default for key in SCHEMA}
        """Value of every key."""

        if values:
            self.values.update(values)

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    @classmethod
    def load(cls, preset: str = 'full', path: Optional[Union[str, Path]] = None,
             seed: Optional[int] = None) -> CliConfig:
        """
        Build the effective configuration.

        :raises ConfigError: If the preset is unknown or the file cannot be read or is invalid.
        """
        if preset not in PRESETS:
            raise ConfigError(f'unknown preset {preset!r} (expected one of {", ".join(PRESETS)})', key='preset')
        config = cls(PRESETS[preset], preset)
        if path is not None:
            try:
                text = Path(path).read_text(encoding='utf-8')
            except OSError as e:
                raise ConfigError(f'cannot read configuration file {path} ({e.strerror})') from e
            except UnicodeDecodeError as e:
                raise ConfigError(f'configuration file {path} is not UTF-8') from e
            config.values.update(ConfigParser.parse_text(text))
        if seed is not None:
            config.values['seed'] = parse_value(KEYS['seed'], str(seed))
        config.validate()
        return config

    def validate(self) -> None:
        """
        Check constraints spanning several keys.

        :raises ConfigError: Naming the offending key.
        """
        stages = len(self['disc_filters'])
        if self['image_size'] % (2 ** stages) != 0:
            raise ConfigError(f'image_size {self["image_size"]} must be divisible by {2 ** stages} '
                              f'for a {stages}-stage discriminator', key='image_size')
        if self['niqe_patch_size'] % (2 ** (self['niqe_scales'] - 1)) != 0:
            raise ConfigError('niqe_patch_size must be divisible by 2^(niqe_scales - 1)', key='niqe_patch_size')
        if self['piqe_segment_length'] > self['piqe_block_size']:
            raise ConfigError('piqe_segment_length must not exceed piqe_block_size', key='piqe_segment_length')

    def echo(self) -> str:
        """Render the effective configuration in the configuration file format."""
        lines = [f'# effective configuration (preset {self.preset})']
        lines += [f'{key.name} = {_format(self.values[key.name])}' for key in SCHEMA]
        return '\n'.join(lines) + '\n'

    def write_echo(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / EFFECTIVE_CONFIG_NAME
        path.write_text(self.echo(), encoding='utf-8')
        return path

    def log(self) -> None:
        for key in SCHEMA:
            logging.info(f'config {key.name} = {_format(self.values[key.name])}')

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_filters=self['base_filters'],
            n_res_blocks=self['n_res_blocks'],
            image_size=self['image_size'],
            alpha=self['alpha'],
            activation=Activation(self['generator_activation']),
            norm=NormMode(self['generator_norm']),
            norm_affine=self['norm_affine'],
            norm_delta=self['norm_delta'],
            init_std=self['init_std'],
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            filters=tuple(self['disc_filters']),
            alpha=self['alpha'],
            norm_affine=self['norm_affine'],
            norm_delta=self['norm_delta'],
            init_std=self['init_std'],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self['epochs'],
            batch_size=self['batch_size'],
            lr=self['lr'],
            beta1=self['beta1'],
            beta2=self['beta2'],
            delta=self['adam_delta'],
            lambda_cyc=self['lambda_cyc'],
            lambda_id=self['lambda_id'],
            seed=self['seed'],
            buffer_size=self['buffer_size'],
            optimizer=OptimizerKind(self['optimizer']),
            max_steps=self['max_steps'],
            checkpoint_every=self['checkpoint_every'],
            log_every=self['log_every'],
            sample_count=self['sample_count'],
            generator=self.generator_config(),
            discriminator=self.discriminator_config(),
        )

    def mscn_config(self) -> MscnConfig:
        return MscnConfig(self['mscn_half_extent'], self['mscn_sigma'], self['mscn_epsilon'])

    def piqe_config(self) -> PiqeConfig:
        return PiqeConfig(
            block_size=self['piqe_block_size'],
            activity_threshold=self['piqe_activity_threshold'],
            impaired_threshold=self['piqe_impaired_threshold'],
            segment_length=self['piqe_segment_length'],
            noise_ratio=self['piqe_noise_ratio'],
            mscn=self.mscn_config(),
        )

    def niqe_config(self) -> NiqeConfig:
        return NiqeConfig(
            patch_size=self['niqe_patch_size'],
            scales=self['niqe_scales'],
            sharpness_percentile=self['niqe_sharpness_percentile'],
            ridge=self['niqe_ridge'],
            min_images=self['niqe_min_images'],
            mscn=self.mscn_config(),
        )
