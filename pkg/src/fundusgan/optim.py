# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

from typing import Mapping

import numpy as np

from .exceptions import NumericalError, OptimizerError
from .tensor import Parameter

DEFAULT_LEARNING_RATE = 0.000364
DEFAULT_BETA1 = 0.5032
DEFAULT_BETA2 = 0.999
DEFAULT_DELTA = 1e-8


class AdamState:
    """
    State of the Adam optimizer for a set of parameters.

    The moments are kept per parameter name. ``step`` counts the completed
    update steps and is the exponent of the bias correction.
    """

    def __init__(self, lr: float = DEFAULT_LEARNING_RATE, beta1: float = DEFAULT_BETA1, beta2: float = DEFAULT_BETA2,
                 delta: float = DEFAULT_DELTA):
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError('decay rates must be in [0, 1)')
        if lr < 0 or delta < 0:
            raise ValueError('learning rate and delta must not be negative')

        self.lr: float = lr
        """Learning rate."""

        self.beta1: float = beta1
        """Decay rate β₁ of the first moment."""

        self.beta2: float = beta2
        """Decay rate β₂ of the second moment."""

        self.delta: float = delta
        """Stabilizer δ, added inside the square root."""

        self.step: int = 0
        """Number of completed steps."""

        self.v: dict[str, np.ndarray] = {}
        """First moment per parameter name."""

        self.s: dict[str, np.ndarray] = {}
        """Second moment per parameter name."""

        self.v_hat: dict[str, np.ndarray] = {}
        """Bias-corrected first moment of the last step."""

        self.s_hat: dict[str, np.ndarray] = {}
        """Bias-corrected second moment of the last step."""

    @property
    def is_initialized(self) -> bool:
        return len(self.v) > 0

    def initialize(self, params: Mapping[str, Parameter]) -> 'AdamState':
        """
        Set the moments of all parameters to zero.

        :param params: Parameters by name.
        :return: This state.
        """
        for name, param in params.items():
            self.v[name] = np.zeros_like(param.data)
            self.s[name] = np.zeros_like(param.data)
        self.step = 0
        return self


def _check_gradients(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray]) -> None:
    for name in params:
        grad = grads.get(name)
        if grad is None:
            raise NumericalError(f'missing gradient for parameter {name}')
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f'gradient of parameter {name} is not finite')


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """
    Update parameters in place with one Adam step.

    ``v ← β₁v + (1−β₁)g``, ``s ← β₂s + (1−β₂)g²``, bias correction
    ``v' = v / (1−β₁ˣ)``, ``s' = s / (1−β₂ˣ)`` and update ``ρ ← ρ − lr·v' / √(s' + δ)``.

    :param params: Parameters by name.
    :param grads: Gradients by parameter name.
    :param state: Optimizer state; its step counter is incremented once.
    :raises OptimizerError: If the state has not been initialized for a parameter.
    :raises NumericalError: If a gradient is missing or not finite.
    """
    for name in params:
        if name not in state.v:
            raise OptimizerError(f'optimizer state is not initialized for parameter {name}')
    _check_gradients(params, grads)

    state.step += 1
    x = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** x
    correction2 = 1.0 - b2 ** x

    for name, param in params.items():
        g = grads[name]
        v = state.v[name] = b1 * state.v[name] + (1.0 - b1) * g
        s = state.s[name] = b2 * state.s[name] + (1.0 - b2) * g * g
        if x == 1:
            # moments start at zero, so the corrected moments are g and g² exactly
            v_hat, s_hat = g.copy(), g * g
        else:
            v_hat = v / correction1
            s_hat = s / correction2
        state.v_hat[name], state.s_hat[name] = v_hat, s_hat
        update = state.lr * v_hat / np.sqrt(s_hat + state.delta)
        param.assign((param.data - update).astype(param.dtype, copy=False))


def sgd_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """
    Update parameters in place with plain gradient descent ``ρ ← ρ − lr·g``.

    :raises NumericalError: If a gradient is missing or not finite.
    """
    _check_gradients(params, grads)
    for name, param in params.items():
        param.assign((param.data - lr * grads[name]).astype(param.dtype, copy=False))
