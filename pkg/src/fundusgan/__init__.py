# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from .enums import (Activation, BlockLabel, Direction, Domain, DType, ExitCode, NormMode, OptimizerKind,
                    PaddingMode, Split)
from .exceptions import (CheckpointError, ConfigError, DataError, DivergenceError, FundusGanError, MetricError,
                         NumericalError, OptimizerError, ShapeError, TapeError)
from .tensor import GradientTape, Parameter, Tensor, backward, finite_diff_grad, no_grad
from .ops import conv2d, conv_transpose2d, elementwise, leaky_relu_op, normalize, reduce, tanh_op
from .layers import (Conv, LeakyReLU, Norm, NormState, ResidualBlock, ResidualBlockParams, Tanh, TransposeConv,
                     batch_norm, instance_norm, leaky_relu, residual_block, tanh_act)
from .optim import AdamState, adam_step, sgd_step
from .models import DiscriminatorConfig, GeneratorConfig, ModelGraph, build_discriminator, build_generator
from .checkpoint import Checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from .data import (CorpusManifest, ImageLoader, ImageSample, Prefetcher, load_image, pairing_order, resize_to,
                   save_image, split_dataset, unpaired_batcher)
from .trainer import (CycleGanNets, FakeImageBuffer, LossRecord, TrainConfig, cycle_loss, identity_loss,
                      lsgan_loss, train, train_step)
from .iqa import (MscnConfig, MscnField, NiqeConfig, NiqeModel, PiqeConfig, PiqeReport, ScoreRow, fit_niqe_model,
                  load_niqe_model, mscn, niqe_distance, niqe_score, piqe, save_niqe_model, score_corpus)
from .synthetic import SyntheticCorpus, write_synthetic_corpus
from .config import CliConfig
from .report import write_report

__author__ = "Manuel Bl."
__license__ = "MIT"
__version__ = "0.1.0"


__all__ = ('Activation', 'AdamState', 'BlockLabel', 'Checkpoint', 'CheckpointError', 'CliConfig', 'Conv',
           'ConfigError', 'CorpusManifest', 'CycleGanNets', 'DType', 'DataError', 'Direction',
           'DiscriminatorConfig', 'DivergenceError', 'Domain', 'ExitCode', 'FakeImageBuffer', 'FundusGanError',
           'GeneratorConfig', 'GradientTape', 'ImageLoader', 'ImageSample', 'LeakyReLU', 'LossRecord',
           'MetricError', 'ModelGraph', 'MscnConfig', 'MscnField', 'NiqeConfig', 'NiqeModel', 'Norm', 'NormMode',
           'NormState', 'NumericalError', 'OptimizerError', 'OptimizerKind', 'PaddingMode', 'Parameter',
           'PiqeConfig', 'PiqeReport', 'Prefetcher', 'ResidualBlock', 'ResidualBlockParams', 'ScoreRow',
           'ShapeError', 'Split', 'SyntheticCorpus', 'Tanh', 'TapeError', 'Tensor', 'TrainConfig', 'TransposeConv',
           'adam_step', 'backward', 'batch_norm', 'build_discriminator', 'build_generator', 'conv2d',
           'conv_transpose2d', 'cycle_loss', 'elementwise', 'finite_diff_grad', 'fit_niqe_model', 'identity_loss',
           'instance_norm', 'leaky_relu', 'leaky_relu_op', 'load_checkpoint', 'load_image', 'load_niqe_model',
           'lsgan_loss', 'mscn', 'niqe_distance', 'niqe_score', 'no_grad', 'normalize', 'pairing_order',
           'parse_checkpoint', 'piqe', 'reduce', 'residual_block', 'resize_to', 'save_checkpoint', 'save_image',
           'save_niqe_model', 'score_corpus', 'sgd_step', 'split_dataset', 'tanh_act', 'tanh_op', 'train',
           'train_step', 'unpaired_batcher', 'write_report', 'write_synthetic_corpus')
