"""Deterministic toy environments and running normalisation.

``PointReach``
    2-D point mass in the box ``[-1, 1]^2`` steered by a clamped force toward
    the origin. Continuous actions, observation ``(x, y, vx, vy)``.
``ChainWalk``
    16-state chain with a slippery left/right action. Reward 1 for every step
    taken from the rightmost state. Discrete actions, one-hot observation.

Each instance owns a ``numpy.random.Generator``; ``(seed, actions)`` fixes
the trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .surrogate import ConfigError

__all__ = [
    "EnvSpec",
    "PointReach",
    "ChainWalk",
    "make_env",
    "VecEnv",
    "RunningNorm",
    "RewardNormalizer",
    "format_trajectory",
]


@dataclass(frozen=True)
class EnvSpec:
    id: str
    obs_dim: int
    discrete: bool
    action_dim: int
    horizon: int

    def __post_init__(self):
        if self.horizon < 1 or self.obs_dim < 1 or self.action_dim < 1:
            raise ConfigError(f"invalid environment spec {self}")


class PointReach:
    arena = 1.0
    goal = (0.0, 0.0)
    goal_radius = 0.05
    damping = 0.8
    thrust = 0.1
    action_cost = 0.01

    def __init__(self, horizon: int = 100, seed: int | None = 0):
        self.spec = EnvSpec("point", 4, False, 2, horizon)
        self.rng = np.random.default_rng(seed)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0

    @property
    def diag(self):
        return 2.0 * math.sqrt(2.0) * self.arena

    def _obs(self):
        return np.concatenate([self.pos, self.vel])

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.pos = self.rng.uniform(-self.arena, self.arena, size=2)
        self.vel = np.zeros(2)
        self.t = 0
        return self._obs()

    def set_state(self, pos, vel=(0.0, 0.0), t=0):
        self.pos = np.asarray(pos, dtype=float).copy()
        self.vel = np.asarray(vel, dtype=float).copy()
        self.t = t
        return self._obs()

    def step(self, action):
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError(f"PointReach expects a finite 2-vector action, got {action!r}")
        a = np.clip(a, -1.0, 1.0)
        vel = self.damping * self.vel + self.thrust * a
        pos = self.pos + vel
        hit = np.abs(pos) > self.arena
        pos = np.clip(pos, -self.arena, self.arena)
        vel[hit] = 0.0
        self.pos, self.vel = pos, vel
        self.t += 1
        dist = float(np.hypot(*(pos - self.goal)))
        reward = -dist - self.action_cost * float(a @ a)
        done = self.t >= self.spec.horizon or dist < self.goal_radius
        return self._obs(), reward, done


class ChainWalk:
    n_states = 16
    slip = 0.1

    def __init__(self, horizon: int = 64, seed: int | None = 0, slip: float | None = None):
        if slip is not None:
            self.slip = slip
        self.spec = EnvSpec("chain", self.n_states, True, 2, horizon)
        self.rng = np.random.default_rng(seed)
        self.state = 0
        self.t = 0

    def _obs(self):
        obs = np.zeros(self.n_states)
        obs[self.state] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = 0
        self.t = 0
        return self._obs()

    def set_state(self, state, t=0):
        self.state = int(state)
        self.t = t
        return self._obs()

    def step(self, action):
        a = np.asarray(action).reshape(-1)
        if a.size != 1 or a[0] not in (0, 1):
            raise ValueError(f"ChainWalk action must be 0 (left) or 1 (right), got {action!r}")
        reward = 1.0 if self.state == self.n_states - 1 else 0.0
        move = 1 if a[0] == 1 else -1
        if self.rng.random() < self.slip:
            move = -move
        self.state = min(max(self.state + move, 0), self.n_states - 1)
        self.t += 1
        return self._obs(), reward, self.t >= self.spec.horizon

    def policy_value(self, p_right) -> float:
        """Exact expected undiscounted return from the start state.

        ``p_right`` is the probability of choosing "right", either a scalar or
        one value per state.
        """
        n = self.n_states
        p = np.broadcast_to(np.asarray(p_right, dtype=float), (n,))
        up = p * (1 - self.slip) + (1 - p) * self.slip
        r = np.zeros(n)
        r[-1] = 1.0
        idx = np.arange(n)
        nxt_up = np.minimum(idx + 1, n - 1)
        nxt_dn = np.maximum(idx - 1, 0)
        v = np.zeros(n)
        for _ in range(self.spec.horizon):
            v = r + up * v[nxt_up] + (1 - up) * v[nxt_dn]
        return float(v[0])


_ENVS = {"point": PointReach, "chain": ChainWalk}


def make_env(env_id: str, seed: int | None = 0, **kwargs):
    try:
        cls = _ENVS[env_id]
    except KeyError:
        raise ConfigError(f"unknown environment {env_id!r}; choose from {sorted(_ENVS)}") from None
    return cls(seed=seed, **kwargs)


@dataclass
class RunningNorm:
    """Running per-dimension mean/variance with clipped standardisation."""

    shape: tuple[int, ...] = ()
    clip: float = 10.0
    eps: float = 1e-8
    count: float = 0.0
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.shape)
        if self.var is None:
            self.var = np.ones(self.shape)
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)

    def update(self, batch):
        """Merge a batch of samples (leading axis) with the running moments."""
        batch = np.asarray(batch, dtype=float).reshape((-1, *self.shape))
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.count == 0:
            return np.clip(x, -self.clip, self.clip)
        return np.clip((x - self.mean) / np.sqrt(self.var + self.eps), -self.clip, self.clip)

    def unapply(self, y):
        y = np.asarray(y, dtype=float)
        if self.count == 0:
            return y
        return y * np.sqrt(self.var + self.eps) + self.mean

    def state_dict(self):
        return {"count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist(), "clip": self.clip}


class RewardNormalizer:
    """Scale rewards by the running std of the discounted return, without centring."""

    def __init__(self, n_envs: int, gamma: float, clip: float = 10.0):
        self.gamma = gamma
        self.returns = np.zeros(n_envs)
        self.stats = RunningNorm((), clip=clip)

    def update(self, rewards, dones):
        self.returns = self.returns * self.gamma + rewards
        self.stats.update(self.returns)
        self.returns = np.where(dones, 0.0, self.returns)

    def apply(self, rewards):
        rewards = np.asarray(rewards, dtype=float)
        if self.stats.count == 0:
            return np.clip(rewards, -self.stats.clip, self.stats.clip)
        return np.clip(rewards / np.sqrt(self.stats.var + self.stats.eps), -self.stats.clip, self.stats.clip)


class VecEnv:
    """``n`` independent copies seeded ``seed, seed + 1, ...`` with auto-reset."""

    def __init__(self, env_id: str, n: int, seed: int, **kwargs):
        self.envs = [make_env(env_id, seed + i, **kwargs) for i in range(n)]
        self.spec = self.envs[0].spec
        self.ep_return = np.zeros(n)
        self.ep_length = np.zeros(n, dtype=int)
        self.finished: list[float] = []

    def __len__(self):
        return len(self.envs)

    def reset(self):
        self.ep_return[:] = 0.0
        self.ep_length[:] = 0
        return np.stack([e.reset() for e in self.envs])

    def step(self, actions):
        obs, rewards, dones = [], np.zeros(len(self)), np.zeros(len(self), dtype=bool)
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            o, r, d = env.step(a)
            self.ep_return[i] += r
            self.ep_length[i] += 1
            if d:
                self.finished.append(float(self.ep_return[i]))
                self.ep_return[i] = 0.0
                self.ep_length[i] = 0
                o = env.reset()
            obs.append(o)
            rewards[i], dones[i] = r, d
        return np.stack(obs), rewards, dones


def format_trajectory(rows) -> str:
    """One step per line, 12 decimal places: ``t obs... reward done``."""
    lines = []
    for t, obs, reward, done in rows:
        fields = [str(t), *(f"{x:.12f}" for x in obs), f"{reward:.12f}", str(int(done))]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"
