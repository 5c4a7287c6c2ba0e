"""
Adam optimizer with bias correction and no weight decay.
"""

from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from patchcert.errors import ConfigError, DimensionError
from patchcert.tensor import Parameter


@dataclass
class AdamState:
    """Per-parameter moment estimates."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def like(cls, param: Parameter) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0)


def adam_step(
    param: Parameter,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Parameter:
    """
    Apply one Adam update to ``param`` in place using ``param.grad``.

    Args:
        param: Parameter whose gradient is already populated
        state: Moment estimates for this parameter, advanced by one step
        lr: Learning rate, must be positive

    Returns:
        The updated parameter

    Raises:
        ConfigError: If lr is not positive
        DimensionError: If gradient or moments do not match the parameter
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grad = param.grad if param.grad is not None else np.zeros_like(param.data)
    if grad.shape != param.shape or state.first_moment.shape != param.shape:
        raise DimensionError("adam state does not match parameter", grad.shape, param.shape)

    state.step_count += 1
    state.first_moment = beta1 * state.first_moment + (1.0 - beta1) * grad
    state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - beta1**state.step_count)
    v_hat = state.second_moment / (1.0 - beta2**state.step_count)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param.data = (param.data - update).astype(param.data.dtype)
    return param


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params: List[Parameter] = list(params)
        self.states = [AdamState.like(p) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr = lr

    @property
    def lr(self) -> float:
        return self._lr

    @lr.setter
    def lr(self, value: float) -> None:
        if value <= 0:
            raise ConfigError(f"learning rate must be positive, got {value}")
        self._lr = float(value)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        for param, state in zip(self.params, self.states):
            adam_step(param, state, self._lr, self.beta1, self.beta2, self.eps)
