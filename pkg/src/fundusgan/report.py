# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path, PurePosixPath
from typing import Optional, Union

import numpy as np

from .exceptions import ConfigError
from .iqa import SCORE_COLUMNS, SUMMARY_COLUMNS, ScoreRow, summarize
from .trainer import LossRecord

SERIES_NAME = 'score-series.csv'
DELTAS_NAME = 'paired-deltas.csv'
SCORE_SUMMARY_NAME = 'score-summary.csv'
LOSS_SUMMARY_NAME = 'loss-summary.csv'
BASELINE_NAME = 'baseline-comparison.csv'
LOSS_WINDOW = 50


def _read_rows(path: Union[str, Path], columns: list[str]) -> list[tuple[int, list[str]]]:
    try:
        with open(path, newline='', encoding='utf-8') as file:
            rows = list(enumerate(csv.reader(file), start=1))
    except OSError as e:
        raise ConfigError(f'cannot read {path} ({e.strerror})') from e
    except (UnicodeDecodeError, csv.Error) as e:
        raise ConfigError(f'{path} is not a valid CSV file ({e})') from e
    if not rows:
        return []
    number, header = rows[0]
    if header != columns:
        raise ConfigError(f'{path}: expected header {",".join(columns)}', number)
    for number, row in rows[1:]:
        if len(row) != len(columns):
            raise ConfigError(f'{path}: expected {len(columns)} fields, got {len(row)}', number)
    return rows[1:]


def _optional_float(text: str, path, number: int, column: str) -> Optional[float]:
    if text == '':
        return None
    try:
        return float(text)
    except ValueError as e:
        raise ConfigError(f'{path}: column {column} is not a number: {text!r}', number) from e


def read_scores(path: Union[str, Path]) -> list[ScoreRow]:
    """
    Read a scores CSV written by :func:`score_corpus`.

    An empty file or a header-only file gives no rows.

    :raises ConfigError: If the file is malformed; the line number is named.
    """
    result = []
    for number, row in _read_rows(path, SCORE_COLUMNS):
        image, group, niqe, piqe, error = row
        result.append(ScoreRow(image, group, _optional_float(niqe, path, number, 'niqe'),
                               _optional_float(piqe, path, number, 'piqe'), error))
    return result


def read_losses(path: Union[str, Path]) -> list[LossRecord]:
    """
    Read a loss history CSV.

    :raises ConfigError: If the file is malformed; the line number is named.
    """
    records = []
    for number, row in _read_rows(path, LossRecord.header()):
        try:
            values = [int(row[0]), int(row[1])] + [float(v) for v in row[2:]]
        except ValueError as e:
            raise ConfigError(f'{path}: invalid loss value ({e})', number) from e
        records.append(LossRecord(*values))
    return records


def paired_deltas(rows: list[ScoreRow]) -> list[list[str]]:
    """
    Pair ``input`` and ``output`` rows by file name and compute ``output − input`` per metric.

    Images missing in one group or failed in either are left out.
    """
    inputs = {PurePosixPath(r.image).name: r for r in rows if r.group == 'input' and not r.error}
    outputs = {PurePosixPath(r.image).name: r for r in rows if r.group == 'output' and not r.error}
    table = []
    for name in sorted(inputs.keys() & outputs.keys()):
        before, after = inputs[name], outputs[name]
        cells = [name]
        for metric in ('niqe', 'piqe'):
            a, b = getattr(before, metric), getattr(after, metric)
            cells += ['' if a is None else repr(a), '' if b is None else repr(b),
                      '' if a is None or b is None else repr(b - a)]
        table.append(cells)
    return table


def loss_summary(records: list[LossRecord], window: int = LOSS_WINDOW) -> list[list[str]]:
    """Mean of the first and last ``window`` steps, minimum, maximum and final value per loss."""
    if not records:
        return []
    table = []
    for name in records[0].losses():
        values = np.array([getattr(r, name) for r in records])
        table.append([name, repr(float(values[:window].mean())), repr(float(values[-window:].mean())),
                      repr(float(values.min())), repr(float(values.max())), repr(float(values[-1]))])
    return table


def baseline_comparison(rows: list[ScoreRow], baseline: list[ScoreRow]) -> list[list[str]]:
    """Group means of two score files side by side."""
    def means(score_rows: list[ScoreRow]) -> dict[tuple[str, str], float]:
        result = {}
        for group in dict.fromkeys(r.group for r in score_rows):
            for metric in ('niqe', 'piqe'):
                values = [getattr(r, metric) for r in score_rows
                          if r.group == group and not r.error and getattr(r, metric) is not None]
                if values:
                    result[(group, metric)] = float(np.mean(values))
        return result

    ours, theirs = means(rows), means(baseline)
    table = []
    for key in dict.fromkeys(list(ours) + list(theirs)):
        a, b = ours.get(key, math.nan), theirs.get(key, math.nan)
        table.append([key[0], key[1], repr(a), repr(b), repr(a - b)])
    return table


def _write(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def write_report(out_dir: Union[str, Path], scores_path: Optional[Union[str, Path]] = None,
                 losses_path: Optional[Union[str, Path]] = None,
                 baseline_path: Optional[Union[str, Path]] = None) -> list[Path]:
    """
    Write plot data and summary tables.

    From a scores CSV: ``score-series.csv`` (one entry per scored image),
    ``paired-deltas.csv`` (input vs output per image) and ``score-summary.csv``.
    From a loss CSV: ``loss-summary.csv``. With a baseline scores CSV:
    ``baseline-comparison.csv``.

    :return: The files written.
    :raises ConfigError: If an input CSV is malformed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if scores_path is not None:
        rows = read_scores(scores_path)
        series = [[str(i)] + row.cells() for i, row in enumerate(rows)]
        _write(out_dir / SERIES_NAME, ['index'] + SCORE_COLUMNS, series)
        _write(out_dir / DELTAS_NAME, ['image', 'niqe_input', 'niqe_output', 'niqe_delta',
                                       'piqe_input', 'piqe_output', 'piqe_delta'], paired_deltas(rows))
        _write(out_dir / SCORE_SUMMARY_NAME, SUMMARY_COLUMNS, summarize(rows))
        written += [out_dir / SERIES_NAME, out_dir / DELTAS_NAME, out_dir / SCORE_SUMMARY_NAME]

        if baseline_path is not None:
            _write(out_dir / BASELINE_NAME, ['group', 'metric', 'mean', 'baseline_mean', 'difference'],
                   baseline_comparison(rows, read_scores(baseline_path)))
            written.append(out_dir / BASELINE_NAME)

    if losses_path is not None:
        _write(out_dir / LOSS_SUMMARY_NAME, ['loss', 'first_window_mean', 'last_window_mean', 'min', 'max', 'final'],
               loss_summary(read_losses(losses_path)))
        written.append(out_dir / LOSS_SUMMARY_NAME)

    logging.info(f'report written to {out_dir} ({len(written)} files)')
    return written
