# src/numerics/gae.py
# Generalized Advantage Estimation: backward recursion and the equivalent
# single matrix product.

from dataclasses import dataclass

import numpy as np

from src.core.errors import ConfigError


@dataclass(frozen=True)
class GaeInputs:
    """
    rewards has length T; values has length T + 1, the last entry being the
    bootstrap value of the state after the final step.
    """

    rewards: np.ndarray
    values: np.ndarray
    gamma: float = 1.0
    lam: float = 0.95

    def __post_init__(self):
        rewards = np.asarray(self.rewards, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if rewards.ndim != 1 or values.ndim != 1:
            raise ConfigError("rewards and values must be one-dimensional", code="gae.shape")
        if len(values) != len(rewards) + 1:
            raise ConfigError(
                f"values needs T+1={len(rewards) + 1} entries, got {len(values)}",
                code="gae.shape",
            )
        for name, x in (('gamma', self.gamma), ('lam', self.lam)):
            if not 0.0 <= x <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {x}", code="gae.range")
        object.__setattr__(self, 'rewards', rewards)
        object.__setattr__(self, 'values', values)

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def deltas(self) -> np.ndarray:
        """TD residuals r_t + gamma * V_{t+1} - V_t."""
        return self.rewards + self.gamma * self.values[1:] - self.values[:-1]


def gae_recursive(inputs: GaeInputs) -> np.ndarray:
    delta = inputs.deltas()
    decay = inputs.gamma * inputs.lam
    advantages = np.zeros_like(delta)
    running = 0.0
    for t in reversed(range(inputs.horizon)):
        running = delta[t] + decay * running
        advantages[t] = running
    return advantages


def discount_matrix(horizon: int, decay: float) -> np.ndarray:
    """Upper-triangular U with U[t, k] = decay ** (k - t) for k >= t."""
    steps = np.arange(horizon)
    offset = steps[None, :] - steps[:, None]
    return np.triu(np.power(decay, np.clip(offset, 0, None), dtype=np.float64))


def gae_matrix(inputs: GaeInputs) -> np.ndarray:
    """All advantages at once as U @ delta."""
    if inputs.horizon == 0:
        return np.zeros(0)
    return discount_matrix(inputs.horizon, inputs.gamma * inputs.lam) @ inputs.deltas()
