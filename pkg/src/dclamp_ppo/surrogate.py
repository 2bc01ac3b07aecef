"""Clipped surrogate objectives for PPO-family policy updates.

Every objective here is a per-sample function of the importance ratio ``w``
and the advantage ``A``. Four variants are supported:

``ppo``
    ``min(w*A, clip(w, 1-eps, 1+eps)*A)``.
``leaky``
    The clip is replaced by a line of slope ``alpha`` outside the band.
``rb``
    Rollback: slope ``-alpha`` outside the band.
``dclamp``
    PPO plus a third argument of slope ``alpha > 1`` that only wins the min
    when the ratio has moved more than ``beta`` against the advantage sign.

All functions broadcast over numpy arrays. Where several arguments of the min
tie, the earliest one (unclipped, clipped, clamp) supplies the derivative.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfigError",
    "Variant",
    "Direction",
    "SurrogateConfig",
    "DEFAULT_ALPHA",
    "ppo_term",
    "leaky_term",
    "rb_term",
    "dclamp_term",
    "surrogate_term",
    "surrogate_grad_w",
    "surrogate_value_and_slope",
    "classify_direction",
    "direction_codes",
]


class ConfigError(ValueError):
    """Raised for hyperparameters outside their admissible range."""


class Variant(str, enum.Enum):
    PPO = "ppo"
    LEAKY = "leaky"
    RB = "rb"
    DCLAMP = "dclamp"


class Direction(enum.IntEnum):
    NEUTRAL = 0
    RIGHT = 1
    WRONG = 2
    STRICT_WRONG = 3

    @property
    def is_wrong(self) -> bool:
        return self in (Direction.WRONG, Direction.STRICT_WRONG)


DEFAULT_ALPHA = {
    Variant.PPO: 0.0,
    Variant.LEAKY: 0.01,
    Variant.RB: 0.3,
    Variant.DCLAMP: 3.0,
}


def _check_eps(eps):
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1), got {eps!r}")


def _check_alpha(variant, alpha):
    if variant is Variant.LEAKY and not 0.0 <= alpha < 1.0:
        raise ConfigError(f"leaky alpha must lie in [0, 1), got {alpha!r}")
    if variant is Variant.RB and not alpha > 0.0:
        raise ConfigError(f"rollback alpha must be > 0, got {alpha!r}")
    if variant is Variant.DCLAMP and not alpha > 1.0:
        raise ConfigError(f"dclamp alpha must be > 1, got {alpha!r}")


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta!r}")


@dataclass(frozen=True)
class SurrogateConfig:
    """Variant tag and its hyperparameters.

    ``alpha`` defaults to the per-variant value in ``DEFAULT_ALPHA`` and
    ``beta`` defaults to ``epsilon``. PPO ignores both.
    """

    variant: Variant = Variant.PPO
    epsilon: float = 0.2
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown surrogate variant {self.variant!r}") from None
        object.__setattr__(self, "variant", variant)
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA[variant])
        if self.beta is None:
            object.__setattr__(self, "beta", self.epsilon)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        _check_eps(self.epsilon)
        _check_alpha(variant, self.alpha)
        _check_beta(self.beta)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "beta": self.beta,
        }


def _candidates(cfg: SurrogateConfig, w, A):
    """Arguments of the min and their w-slopes, stacked along axis 0."""
    lo, hi = 1.0 - cfg.epsilon, 1.0 + cfg.epsilon
    values = [w * A]
    slopes = [1.0 * A]
    v = cfg.variant
    if v is Variant.PPO or v is Variant.DCLAMP:
        inside = ((w > lo) & (w < hi)).astype(float)
        values.append(np.clip(w, lo, hi) * A)
        slopes.append(inside * A)
    elif v is Variant.LEAKY:
        a = cfg.alpha
        below, above = w <= lo, w >= hi
        f = np.where(below, a * w + (1.0 - a) * lo, np.where(above, a * w + (1.0 - a) * hi, w))
        values.append(f * A)
        slopes.append(np.where(below | above, a, 1.0) * A)
    else:
        a = cfg.alpha
        below, above = w <= lo, w >= hi
        f = np.where(below, -a * w + (1.0 + a) * lo, np.where(above, -a * w + (1.0 + a) * hi, w))
        values.append(f * A)
        slopes.append(np.where(below | above, -a, 1.0) * A)
    if v is Variant.DCLAMP:
        a = cfg.alpha
        pivot = np.where(A > 0, 1.0 - cfg.beta, 1.0 + cfg.beta)
        values.append((a * w - (a - 1.0) * pivot) * A)
        slopes.append(a * A)
    return np.stack(values), np.stack(slopes)


def surrogate_value_and_slope(cfg: SurrogateConfig, w, A):
    """Per-sample objective and its derivative with respect to ``w``."""
    w = np.asarray(w, dtype=float)
    A = np.asarray(A, dtype=float)
    w, A = np.broadcast_arrays(w, A)
    values, slopes = _candidates(cfg, w, A)
    # argmin keeps the first index on ties, which fixes the kink convention
    idx = np.argmin(values, axis=0)[None]
    val = np.take_along_axis(values, idx, axis=0)[0]
    slope = np.take_along_axis(slopes, idx, axis=0)[0]
    if val.ndim == 0:
        return float(val), float(slope)
    return val, slope


def surrogate_term(cfg: SurrogateConfig, w, A):
    return surrogate_value_and_slope(cfg, w, A)[0]


def surrogate_grad_w(cfg: SurrogateConfig, w, A):
    return surrogate_value_and_slope(cfg, w, A)[1]


def ppo_term(w, A, eps):
    return surrogate_term(SurrogateConfig(Variant.PPO, eps), w, A)


def leaky_term(w, A, eps, alpha):
    return surrogate_term(SurrogateConfig(Variant.LEAKY, eps, alpha), w, A)


def rb_term(w, A, eps, alpha):
    return surrogate_term(SurrogateConfig(Variant.RB, eps, alpha), w, A)


def dclamp_term(w, A, eps, alpha, beta):
    return surrogate_term(SurrogateConfig(Variant.DCLAMP, eps, alpha, beta), w, A)


def direction_codes(w, A, beta):
    """Vectorised :func:`classify_direction`, returning ``Direction`` codes."""
    w = np.asarray(w, dtype=float)
    A = np.asarray(A, dtype=float)
    prod = (w - 1.0) * A
    strict = ((A > 0) & (w < 1.0 - beta)) | ((A < 0) & (w > 1.0 + beta))
    codes = np.full(np.broadcast(w, A).shape, int(Direction.NEUTRAL), dtype=np.int8)
    codes[prod > 0] = Direction.RIGHT
    codes[prod < 0] = Direction.WRONG
    codes[(prod < 0) & strict] = Direction.STRICT_WRONG
    return codes


def classify_direction(w: float, A: float, beta: float) -> Direction:
    """Where the ratio ``w`` sits relative to the advantage sign.

    A sample is wrong when ``(w - 1) * A < 0`` and strictly wrong when, in
    addition, it is more than ``beta`` away from 1.
    """
    return Direction(int(direction_codes(w, A, beta)))
