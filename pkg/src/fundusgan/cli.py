# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

"""
Command-line tool.

Subcommands ``train``, ``infer``, ``score``, ``report`` and ``synth``. Every
command writes into its ``--out`` directory only, including the effective
configuration (``effective-config.txt``) and the log (``run.log``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

from .checkpoint import load_checkpoint
from .config import PRESETS, CliConfig
from .data import IMAGE_SUFFIXES, MANIFEST_NAME, grid_image, load_image, resize_to, save_image, split_dataset
from .enums import Direction, ExitCode
from .exceptions import (CheckpointError, ConfigError, DataError, DivergenceError, MetricError, NumericalError,
                         ShapeError)
from .iqa import fit_niqe_model, load_niqe_model, save_niqe_model, score_corpus
from .report import write_report
from .synthetic import write_synthetic_corpus
from .tensor import Tensor, no_grad
from .trainer import train

LOG_NAME = 'run.log'
SCORES_NAME = 'scores.csv'
NIQE_MODEL_NAME = 'niqe-model.fgan'


def _image_files(path: Path) -> list[Path]:
    """Single image file or all images of a directory tree, sorted by path."""
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f'{path} does not exist')
    return sorted(p for p in path.rglob('*') if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_train(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    out = Path(args.out)
    manifest = split_dataset(args.corpus, config['seed'], config['test_fraction'], out / MANIFEST_NAME)
    result = train(config.train_config(), manifest, out, resume=args.resume, prefetch=config['prefetch'])
    logging.info(f'final checkpoint: {result.checkpoint}')
    return ExitCode.OK


def cmd_infer(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    out = Path(args.out)
    direction = Direction(args.direction)
    checkpoint = load_checkpoint(args.checkpoint)
    generator = checkpoint.build_model(direction.generator_role)
    size = generator.config.image_size
    source = Path(args.input)
    files = _image_files(source)
    # output tree mirrors the input tree
    targets = [(f.relative_to(source) if source.is_dir() else Path(f.name)).with_suffix('.png') for f in files]
    seen: dict[Path, Path] = {}
    for file, target in zip(files, targets):
        if target in seen:
            raise DataError(f'{file} and {seen[target]} would both be written to {out / target}')
        seen[target] = file

    with no_grad():
        for file, target in zip(files, targets):
            sample = load_image(file)
            if args.no_resize:
                if sample.height != size or sample.width != size:
                    raise ShapeError(f'{file}: image is {sample.height}×{sample.width}, '
                                     f'checkpoint expects {size}×{size}')
            else:
                sample = resize_to(sample, size)
            translated = generator(Tensor(sample.data[None])).data[0]
            (out / target).parent.mkdir(parents=True, exist_ok=True)
            save_image(translated, out / target)
            if args.grid:
                (out / 'grids' / target).parent.mkdir(parents=True, exist_ok=True)
                save_image(grid_image([(sample.data, translated)]), out / 'grids' / target)

    logging.info(f'{len(files)} images translated ({direction.value}) with {generator.role}')
    return ExitCode.OK


def cmd_score(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    out = Path(args.out)
    if args.niqe_model is not None:
        model = load_niqe_model(args.niqe_model)
    elif args.fit_corpus is not None:
        model = fit_niqe_model((load_image(p) for p in _image_files(Path(args.fit_corpus))), config.niqe_config())
        save_niqe_model(model, out / NIQE_MODEL_NAME)
        logging.info(f'NIQE model written to {out / NIQE_MODEL_NAME}')
    else:
        model = None
        logging.warning('no NIQE model given, only PIQE is computed')

    images = []
    for directory, group in ((args.input, 'input'), (args.output, 'output')):
        if directory is not None:
            images += [(p, group) for p in _image_files(Path(directory))]
    if not images:
        raise ConfigError('no images to score (use --input and/or --output)')

    rows = score_corpus(images, model, out / SCORES_NAME, config.piqe_config())
    failed = sum(1 for row in rows if row.error)
    logging.info(f'{len(rows)} images scored, {failed} failed')
    return ExitCode.ALL_FAILED if rows and failed == len(rows) else ExitCode.OK


def cmd_report(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    if args.scores is None and args.losses is None:
        raise ConfigError('nothing to report (use --scores and/or --losses)')
    write_report(args.out, args.scores, args.losses, args.baseline)
    return ExitCode.OK


def cmd_synth(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    if args.count < 1 or args.size < 8:
        raise ConfigError('--count must be positive and --size at least 8')
    write_synthetic_corpus(args.out, args.count, args.size, config['seed'])
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fundusgan', description='Artifact reduction for fundus images')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='configuration file (key = value lines)')
    common.add_argument('--preset', default='full', choices=list(PRESETS), help='configuration preset')
    common.add_argument('--seed', type=int, help='seed, overrides the configuration')
    common.add_argument('--out', required=True, help='output directory')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('train', parents=[common], help='train the generators and discriminators')
    p.add_argument('--corpus', required=True, help='corpus directory with with_artifact/ and artifact_free/')
    p.add_argument('--resume', help='checkpoint to continue from')
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('infer', parents=[common], help='translate images with a trained generator')
    p.add_argument('--checkpoint', required=True, help='checkpoint file')
    p.add_argument('--input', required=True, help='image file or directory')
    p.add_argument('--direction', default=Direction.M_TO_N.value, choices=[d.value for d in Direction])
    p.add_argument('--grid', action='store_true', help='also write input|output side-by-side images')
    p.add_argument('--no-resize', action='store_true', help='reject images not matching the checkpoint size')
    p.set_defaults(handler=cmd_infer)

    p = commands.add_parser('score', parents=[common], help='compute NIQE and PIQE scores')
    p.add_argument('--input', help='directory of input images (group "input")')
    p.add_argument('--output', help='directory of output images (group "output")')
    model = p.add_mutually_exclusive_group()
    model.add_argument('--niqe-model', help='fitted NIQE model file')
    model.add_argument('--fit-corpus', help='directory of artifact-free images to fit a NIQE model to')
    p.set_defaults(handler=cmd_score)

    p = commands.add_parser('report', parents=[common], help='write plot data and summary tables')
    p.add_argument('--scores', help='scores CSV')
    p.add_argument('--losses', help='loss CSV of a training run')
    p.add_argument('--baseline', help='scores CSV of another model for comparison')
    p.set_defaults(handler=cmd_report)

    p = commands.add_parser('synth', parents=[common], help='write a synthetic toy corpus')
    p.add_argument('--count', type=int, default=64, help='images per domain')
    p.add_argument('--size', type=int, default=32, help='image size in pixels')
    p.set_defaults(handler=cmd_synth)
    return parser


def _exit_code(error: Exception) -> ExitCode:
    if isinstance(error, ConfigError):
        return ExitCode.CONFIG_ERROR
    if isinstance(error, ShapeError):
        return ExitCode.SHAPE_MISMATCH
    if isinstance(error, NumericalError):
        return ExitCode.DIVERGENCE
    return ExitCode.DATA_ERROR


def _attach_handlers(out: Optional[Path]) -> list[logging.Handler]:
    formatter = logging.Formatter('%(asctime)s %(levelname)s %(message)s')
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out is not None:
        handlers.append(logging.FileHandler(out / LOG_NAME, mode='w', encoding='utf-8'))
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return handlers


def main(argv: Optional[list[str]] = None) -> int:
    """
    Run a command.

    :param argv: Arguments without the program name (defaults to ``sys.argv[1:]``).
    :return: Exit code (see :class:`ExitCode`).
    """
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f'fundusgan: cannot create output directory {out} ({e.strerror})', file=sys.stderr)
        return int(ExitCode.DATA_ERROR)

    handlers = _attach_handlers(out)
    handler: Callable[[argparse.Namespace, CliConfig], ExitCode] = args.handler
    try:
        config = CliConfig.load(args.preset, args.config, args.seed)
        config.write_echo(out)
        config.log()
        code = handler(args, config)
    except DivergenceError as e:
        logging.error(f'training diverged: {e}')
        if e.record is not None:
            logging.error(f'last loss record: {e.record}')
        code = ExitCode.DIVERGENCE
    except (ConfigError, DataError, CheckpointError, MetricError, NumericalError, ShapeError) as e:
        logging.error(str(e))
        code = _exit_code(e)
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()

    return int(code)
