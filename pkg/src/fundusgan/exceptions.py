# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from typing import Optional


class FundusGanError(Exception):
    """
    Exception raised when a fundusgan operation fails.
    """
    def __init__(self, message: str):
        super().__init__(message)


class ShapeError(FundusGanError):
    """
    Exception raised when tensor shapes violate an operation's contract.

    The message names the offending axis.
    """
    def __init__(self, message: str):
        super().__init__(message)


class TapeError(FundusGanError):
    """
    Exception raised when the gradient tape is used incorrectly.

    Examples are calling :func:`backward` on a non-scalar loss or on a tape
    that has already been consumed by a previous call.
    """
    def __init__(self, message: str):
        super().__init__(message)


class NumericalError(FundusGanError):
    """
    Exception raised when a gradient or a function value is not finite.
    """
    def __init__(self, message: str):
        super().__init__(message)


class DivergenceError(NumericalError):
    """
    Exception raised when a training step produces a non-finite loss.

    ``record`` holds the :class:`LossRecord` of the failed step for diagnosis.
    """
    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record
        """Loss record of the diverged step."""


class OptimizerError(FundusGanError):
    """
    Exception raised when the optimizer state is used incorrectly.
    """
    def __init__(self, message: str):
        super().__init__(message)


class CheckpointError(FundusGanError):
    """
    Exception raised when a checkpoint or model file is malformed.

    ``offset`` is the byte position where the problem was detected.
    """
    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f'{message} (at byte offset {offset})')
        self.offset: Optional[int] = offset
        """Byte offset of the problem, or ``None`` if it is not position related."""


class ConfigError(FundusGanError):
    """
    Exception raised when a configuration file or value is invalid.
    """
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        prefix = f'line {line}: ' if line is not None else ''
        super().__init__(prefix + message)
        self.line: Optional[int] = line
        """Line number (1-based), or ``None`` if the value did not come from a file."""

        self.key: Optional[str] = key
        """Configuration key, or ``None`` if the line has no valid key."""


class DataError(FundusGanError):
    """
    Exception raised when an image or corpus cannot be read or is unusable.
    """
    def __init__(self, message: str):
        super().__init__(message)


class MetricError(FundusGanError):
    """
    Exception raised when an image quality metric cannot be computed.
    """
    def __init__(self, message: str):
        super().__init__(message)
