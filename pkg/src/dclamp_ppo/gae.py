"""Generalized advantage estimation over fixed-horizon rollouts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdvantageBuffer", "compute_gae", "normalize_advantages"]


@dataclass
class AdvantageBuffer:
    advantages: np.ndarray
    value_targets: np.ndarray
    gamma: float
    lam: float


def compute_gae(rewards, values, dones, gamma, lam) -> AdvantageBuffer:
    """Backward GAE recursion.

    ``rewards`` and ``dones`` have shape ``(T,)`` or ``(T, n_envs)``; ``values``
    has one extra leading row holding the bootstrap value of the state after
    the last step. ``dones[t]`` marks that step ``t`` ended its episode, which
    zeroes both the bootstrap and the carry from step ``t + 1``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(
            f"values must have shape ({rewards.shape[0] + 1}, ...) matching rewards "
            f"{rewards.shape}, got {values.shape}"
        )
    if dones.shape != rewards.shape:
        raise ValueError(f"dones shape {dones.shape} != rewards shape {rewards.shape}")
    if not (0.0 < gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"need gamma in (0, 1] and lam in [0, 1], got {gamma}, {lam}")

    T = rewards.shape[0]
    live = 1.0 - dones.astype(float)
    adv = np.zeros_like(rewards)
    carry = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * live[t] - values[t]
        carry = delta + gamma * lam * live[t] * carry
        adv[t] = carry
    return AdvantageBuffer(adv, adv + values[:-1], gamma, lam)


def normalize_advantages(adv, eps=1e-8):
    """Standardise to zero mean and unit population std."""
    adv = np.asarray(adv, dtype=float)
    if adv.size < 2:
        raise ValueError("need at least two advantages to standardise")
    centered = adv - adv.mean()
    std = adv.std()
    if std == 0.0:
        return np.zeros_like(adv)
    return centered / (std + eps)
