"""Rollout collection, minibatch updates and the outer training loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import DirectionStats, Histogram, direction_stats, histogram
from .env import RewardNormalizer, RunningNorm, VecEnv, make_env
from .gae import compute_gae, normalize_advantages
from .nn import (
    AdamState,
    ParamVector,
    PolicySpec,
    adam_step,
    clip_grad_norm,
    init_params,
    log_prob,
    loss_and_grad,
    policy_dist,
    save_checkpoint,
    value_forward,
)
from .surrogate import ConfigError, SurrogateConfig, Variant

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "PRESETS",
    "RB_ALPHA_OVERRIDES",
    "preset_config",
    "make_policy_spec",
    "Transition",
    "RolloutBatch",
    "Policy",
    "IterationMetrics",
    "TrainReport",
    "collect_rollout",
    "train_iteration",
    "train",
    "evaluate",
    "METRIC_FIELDS",
    "EVAL_FIELDS",
]

METRIC_FIELDS = (
    "iter", "epoch", "minibatch", "loss", "policy_loss", "value_loss", "entropy",
    "frac_wrong_pos", "frac_wrong_neg", "frac_strict_pos", "frac_strict_neg", "mse_pos", "mse_neg",
)
EVAL_FIELDS = ("episodes", "mean_return", "std_return")

HIST_BINS = 40
HIST_RANGE = (0.0, 2.0)


@dataclass
class TrainConfig:
    """Every knob of a training run. Serialises to a flat JSON object."""

    env: str = "chain"
    variant: str = "ppo"
    epsilon: float = 0.2
    alpha: float | None = None
    beta: float | None = None
    n_timesteps: int = 100_000
    n_steps: int = 256
    n_envs: int = 4
    batch_size: int = 64
    n_epochs: int = 10
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    c_vf: float = 0.5
    c_ent: float = 0.0
    max_grad_norm: float = 0.5
    normalize_obs: bool = False
    normalize_reward: bool = False
    normalize_advantage: bool = True
    seed: int = 0
    eval_every: int = 100
    eval_episodes: int = 10
    horizon: int | None = None
    pi_hidden: tuple[int, ...] = (64, 64)
    vf_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    log_std_init: float = -2.0
    ortho_init: bool = True
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.pi_hidden = tuple(int(h) for h in self.pi_hidden)
        self.vf_hidden = tuple(int(h) for h in self.vf_hidden)
        self.validate()

    def validate(self):
        self.surrogate  # raises ConfigError on bad variant hyperparameters
        positive = ("n_timesteps", "n_steps", "n_envs", "batch_size", "eval_every", "eval_episodes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_epochs < 0:
            raise ConfigError("n_epochs must be >= 0")
        if (self.n_steps * self.n_envs) % self.batch_size:
            raise ConfigError(
                f"batch_size {self.batch_size} must divide n_steps * n_envs = {self.n_steps * self.n_envs}"
            )
        if self.lr < 0 or self.max_grad_norm <= 0 or self.c_vf < 0 or self.c_ent < 0:
            raise ConfigError("lr, c_vf, c_ent must be >= 0 and max_grad_norm > 0")
        if not (0 < self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("need gamma in (0, 1] and lam in [0, 1]")
        make_env(self.env, seed=0)

    @property
    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(self.variant, self.epsilon, self.alpha, self.beta)

    @property
    def rollout_size(self):
        return self.n_steps * self.n_envs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pi_hidden"] = list(self.pi_hidden)
        d["vf_hidden"] = list(self.vf_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Hyperparameters of the MuJoCo runs reproduced for reference, plus the toy
# settings used by the acceptance experiments.
_MUJOCO_POLICY_KWARGS = dict(log_std_init=-2.0, ortho_init=False, activation="relu",
                             pi_hidden=(256, 256), vf_hidden=(256, 256))
PRESETS: dict[str, dict] = {
    "chain": dict(env="chain", n_steps=256, n_envs=4, batch_size=128, n_epochs=10, lr=1e-3,
                  gamma=0.99, lam=0.95, epsilon=0.2, c_ent=0.0, c_vf=0.5, max_grad_norm=0.5,
                  normalize_obs=False, normalize_reward=True),
    "point": dict(env="point", n_steps=256, n_envs=4, batch_size=128, n_epochs=10, lr=1e-3,
                  gamma=0.95, lam=0.95, epsilon=0.2, c_ent=0.0, c_vf=0.5, max_grad_norm=0.5,
                  normalize_obs=True, normalize_reward=True),
    "Ant-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=10_000_000,
                   batch_size=32, n_steps=512, gamma=0.98, lr=1.90609e-5, c_ent=4.9646e-7,
                   epsilon=0.1, n_epochs=10, lam=0.8, max_grad_norm=0.6, c_vf=0.677239),
    "HalfCheetah-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=1_000_000,
                           batch_size=64, n_steps=512, gamma=0.98, lr=2.0633e-5, c_ent=4.01762e-4,
                           epsilon=0.1, n_epochs=20, lam=0.92, max_grad_norm=0.8, c_vf=0.58096,
                           **_MUJOCO_POLICY_KWARGS),
    "Hopper-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=1_000_000,
                      batch_size=32, n_steps=512, gamma=0.999, lr=9.80828e-5, c_ent=2.29519e-3,
                      epsilon=0.2, n_epochs=5, lam=0.99, max_grad_norm=0.7, c_vf=0.835671,
                      **_MUJOCO_POLICY_KWARGS),
    "Humanoid-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=10_000_000,
                        batch_size=256, n_steps=512, gamma=0.95, lr=3.56987e-5, c_ent=2.38306e-3,
                        epsilon=0.3, n_epochs=5, lam=0.9, max_grad_norm=2.0, c_vf=0.431892,
                        **_MUJOCO_POLICY_KWARGS),
    "Reacher-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=1_000_000,
                       batch_size=32, n_steps=512, gamma=0.9, lr=1.04019e-4, c_ent=7.52585e-8,
                       epsilon=0.3, n_epochs=5, lam=1.0, max_grad_norm=0.9, c_vf=0.950368),
    "Walker2d-v4": dict(normalize_obs=True, normalize_reward=True, n_envs=1, n_timesteps=1_000_000,
                        batch_size=32, n_steps=512, gamma=0.99, lr=5.05041e-5, c_ent=5.85045e-4,
                        epsilon=0.1, n_epochs=20, lam=0.95, max_grad_norm=1.0, c_vf=0.871923),
    "Swimmer-v4": dict(normalize_obs=False, normalize_reward=False, n_envs=4, n_timesteps=1_000_000,
                       n_steps=1024, batch_size=256, n_epochs=10, gamma=0.9999, lam=0.98,
                       epsilon=0.2, c_ent=0.0, c_vf=0.5, max_grad_norm=0.5, lr=6e-4),
}
# Rollback slope differs for the humanoid preset.
RB_ALPHA_OVERRIDES = {"Humanoid-v4": 0.02}


def preset_config(name: str, **overrides) -> TrainConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    if base.get("variant") == Variant.RB.value and "alpha" not in overrides and name in RB_ALPHA_OVERRIDES:
        base["alpha"] = RB_ALPHA_OVERRIDES[name]
    return TrainConfig(**base)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    logprob_old: float
    value_old: float


@dataclass
class RolloutBatch:
    """Flattened rollout, time-major over ``(n_steps, n_envs)``.

    ``obs`` are the (normalised) network inputs and ``rewards`` the
    (normalised) rewards that entered GAE.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logprob_old: np.ndarray
    value_old: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    def __getitem__(self, i) -> Transition:
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]), bool(self.dones[i]),
                          float(self.logprob_old[i]), float(self.value_old[i]))

    def subset(self, idx) -> "RolloutBatch":
        return RolloutBatch(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))

    def with_advantages(self, adv) -> "RolloutBatch":
        return dataclasses.replace(self, advantages=adv)


@dataclass
class Policy:
    """Actor/critic parameters plus the observation normaliser they were trained with."""

    params: ParamVector
    spec: PolicySpec
    obs_norm: RunningNorm | None = None

    def prepare(self, obs, update=False):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.obs_norm is None:
            return obs
        if update:
            self.obs_norm.update(obs)
        return self.obs_norm.apply(obs)

    def act(self, obs, rng=None, deterministic=False):
        """Actions for already-prepared observations."""
        dist = policy_dist(self.params, self.spec, obs)
        if deterministic:
            return dist.mode()
        return dist.sample(rng)

    def predict(self, obs):
        """Deterministic actions for raw observations (normaliser frozen)."""
        return self.act(self.prepare(obs), deterministic=True)


def collect_rollout(policy: Policy, venv: VecEnv, n_steps: int, rng, gamma: float, lam: float,
                    reward_norm: RewardNormalizer | None = None, update_norm: bool = True):
    """Run the frozen behaviour policy for ``n_steps`` in every env and compute GAE.

    ``venv.last_obs`` carries raw observations between calls.
    """
    n = len(venv)
    spec = policy.spec
    if getattr(venv, "last_obs", None) is None:
        venv.last_obs = venv.reset()
    obs = policy.prepare(venv.last_obs, update=update_norm)
    obs_buf = np.zeros((n_steps, n, spec.obs_dim))
    act_buf = np.zeros((n_steps, n), dtype=int) if spec.discrete else np.zeros((n_steps, n, spec.action_dim))
    rew_buf = np.zeros((n_steps, n))
    done_buf = np.zeros((n_steps, n), dtype=bool)
    val_buf = np.zeros((n_steps + 1, n))
    for t in range(n_steps):
        obs_buf[t] = obs
        val_buf[t] = value_forward(policy.params, spec, obs)
        actions = policy.act(obs, rng)
        act_buf[t] = actions
        try:
            raw_obs, rewards, dones = venv.step(actions)
        except ValueError as exc:
            raise ValueError(f"environment rejected step {t}: {exc}") from exc
        if reward_norm is not None:
            if update_norm:
                reward_norm.update(rewards, dones)
            rewards = reward_norm.apply(rewards)
        rew_buf[t] = rewards
        done_buf[t] = dones
        venv.last_obs = raw_obs
        obs = policy.prepare(raw_obs, update=update_norm)
    val_buf[n_steps] = value_forward(policy.params, spec, obs)

    gae = compute_gae(rew_buf, val_buf, done_buf, gamma, lam)
    flat_obs = obs_buf.reshape(n_steps * n, spec.obs_dim)
    flat_act = act_buf.reshape(n_steps * n, *act_buf.shape[2:])
    # one batched pass, so that recomputing with the same parameters is exact
    logp = log_prob(policy_dist(policy.params, spec, flat_obs), flat_act)
    return RolloutBatch(
        obs=flat_obs,
        actions=flat_act,
        rewards=rew_buf.ravel(),
        dones=done_buf.ravel(),
        logprob_old=logp,
        value_old=val_buf[:-1].ravel(),
        advantages=gae.advantages.ravel(),
        value_targets=gae.value_targets.ravel(),
    )


@dataclass
class IterationMetrics:
    rows: list[dict] = field(default_factory=list)
    stats: DirectionStats = field(default_factory=DirectionStats)
    # same ratios classified with the band fixed at epsilon, comparable across beta values
    ref_stats: DirectionStats = field(default_factory=DirectionStats)
    hist_pos: Histogram | None = None
    hist_neg: Histogram | None = None
    last_epoch_stats: DirectionStats = field(default_factory=DirectionStats)


def train_iteration(batch: RolloutBatch, params: ParamVector, cfg: TrainConfig, spec: PolicySpec,
                    adam: AdamState, shuffle_rng, iteration: int = 0):
    """K epochs of shuffled minibatch updates on one rollout.

    Returns ``(params, adam, metrics)``. Ratios and direction statistics are
    recorded for every minibatch at the moment its loss is evaluated, using
    raw (unstandardised) advantage signs.
    """
    surrogate = cfg.surrogate
    metrics = IterationMetrics()
    seen_ratios, seen_adv = [], []
    N = len(batch)
    for epoch in range(cfg.n_epochs):
        perm = shuffle_rng.permutation(N)
        epoch_stats = DirectionStats()
        for k, start in enumerate(range(0, N, cfg.batch_size)):
            mb = batch.subset(perm[start : start + cfg.batch_size])
            raw_adv = mb.advantages
            if cfg.normalize_advantage and len(mb) > 1:
                mb = mb.with_advantages(normalize_advantages(raw_adv))
            info = loss_and_grad(params, spec, mb, surrogate, cfg.c_vf, cfg.c_ent)
            grad = clip_grad_norm(info.grad, cfg.max_grad_norm)
            params, adam = adam_step(params, grad, adam, cfg.lr)

            stats = direction_stats(info.ratios, raw_adv, surrogate.beta)
            metrics.stats = metrics.stats + stats
            metrics.ref_stats = metrics.ref_stats + direction_stats(info.ratios, raw_adv, surrogate.epsilon)
            epoch_stats = epoch_stats + stats
            seen_ratios.append(info.ratios)
            seen_adv.append(raw_adv)
            metrics.rows.append({
                "iter": iteration, "epoch": epoch, "minibatch": k,
                "loss": info.loss, "policy_loss": info.policy_loss,
                "value_loss": info.value_loss, "entropy": info.entropy,
                "frac_wrong_pos": stats.frac_wrong_pos, "frac_wrong_neg": stats.frac_wrong_neg,
                "frac_strict_pos": stats.frac_strict_pos, "frac_strict_neg": stats.frac_strict_neg,
                "mse_pos": stats.mse_pos, "mse_neg": stats.mse_neg,
            })
        metrics.last_epoch_stats = epoch_stats
    if seen_ratios:
        metrics.hist_pos, metrics.hist_neg = histogram(
            np.concatenate(seen_ratios), np.concatenate(seen_adv), HIST_BINS, HIST_RANGE
        )
    return params, adam, metrics


def evaluate(policy: Policy, env, n_episodes: int):
    """Mean and std of undiscounted returns under deterministic actions."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns = []
    for _ in range(n_episodes):
        obs = env.reset()
        total, done = 0.0, False
        while not done:
            action = policy.predict(obs)[0]
            obs, r, done = env.step(action)
            total += r
        returns.append(total)
    returns = np.asarray(returns)
    return float(returns.mean()), float(returns.std())


@dataclass
class TrainReport:
    config: TrainConfig
    policy: Policy
    metrics: list[dict]
    evals: list[dict]
    stats: DirectionStats
    hist_pos: Histogram | None
    hist_neg: Histogram | None
    episodes: int
    timesteps: int
    iterations: int
    episode_returns: list[float] = field(default_factory=list)
    ref_stats: DirectionStats = field(default_factory=DirectionStats)

    @property
    def final_return(self) -> float:
        return self.evals[-1]["mean_return"]

    def metrics_csv(self) -> str:
        return _rows_to_csv(self.metrics, METRIC_FIELDS)

    def evals_csv(self) -> str:
        return _rows_to_csv(self.evals, EVAL_FIELDS)

    def episodes_csv(self) -> str:
        rows = [{"episode": i, "return": r} for i, r in enumerate(self.episode_returns)]
        return _rows_to_csv(rows, ("episode", "return"))

    def top_episode_mean(self, k: int = 10):
        if not self.episode_returns:
            return None
        return float(np.mean(sorted(self.episode_returns)[-k:]))

    def last_eval_mean(self, k: int = 10) -> float:
        return float(np.mean([e["mean_return"] for e in self.evals[-k:]]))

    def write(self, out_dir) -> dict[str, Path]:
        """Write metric/eval CSVs, ratio statistics and the final checkpoint."""
        from .diagnostics import export

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out / "metrics.csv",
            "eval": out / "eval.csv",
            "episodes": out / "episodes.csv",
            "stats": out / "direction_stats.json",
            "ref_stats": out / "direction_stats_ref.json",
            "histogram": out / "ratio_histogram.csv",
            "checkpoint": out / "checkpoint.json",
        }
        try:
            paths["metrics"].write_text(self.metrics_csv())
            paths["eval"].write_text(self.evals_csv())
            paths["episodes"].write_text(self.episodes_csv())
        except OSError as exc:
            raise OSError(f"cannot write metrics under {out}: {exc}") from exc
        export(self.stats, paths["stats"], "json")
        export(self.ref_stats, paths["ref_stats"], "json")
        if self.hist_pos is not None:
            export((self.hist_pos, self.hist_neg), paths["histogram"], "csv")
        else:
            del paths["histogram"]
        extra = {"obs_norm": self.policy.obs_norm.state_dict() if self.policy.obs_norm else None}
        save_checkpoint(paths["checkpoint"], self.policy.params, self.policy.spec, extra)
        return paths


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def _rows_to_csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in header])
    return buf.getvalue()


def make_policy_spec(cfg: TrainConfig, env_spec) -> PolicySpec:
    return PolicySpec(
        obs_dim=env_spec.obs_dim,
        action_dim=env_spec.action_dim,
        discrete=env_spec.discrete,
        pi_hidden=cfg.pi_hidden,
        vf_hidden=cfg.vf_hidden,
        activation=cfg.activation,
        log_std_init=cfg.log_std_init,
        ortho_init=cfg.ortho_init,
    )


def _env_kwargs(cfg):
    return {} if cfg.horizon is None else {"horizon": cfg.horizon}


def train(cfg: TrainConfig, callback=None) -> TrainReport:
    """Alternate rollouts and update iterations until ``n_timesteps`` are consumed.

    After every ``eval_every`` finished training episodes (and once at the
    end) the policy is evaluated for ``eval_episodes`` deterministic episodes.
    """
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    init_rng, action_rng, shuffle_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    venv = VecEnv(cfg.env, cfg.n_envs, cfg.seed, **_env_kwargs(cfg))
    eval_env = make_env(cfg.env, seed=cfg.seed + 10_000, **_env_kwargs(cfg))
    spec = make_policy_spec(cfg, venv.spec)
    policy = Policy(
        init_params(spec, init_rng),
        spec,
        RunningNorm((spec.obs_dim,)) if cfg.normalize_obs else None,
    )
    reward_norm = RewardNormalizer(cfg.n_envs, cfg.gamma) if cfg.normalize_reward else None
    adam = AdamState.zeros(len(policy.params), eps_hat=cfg.adam_eps)

    n_iters = math.ceil(cfg.n_timesteps / cfg.rollout_size)
    metrics, evals = [], []
    stats = ref_stats = DirectionStats()
    hist_pos = hist_neg = None
    next_eval = cfg.eval_every
    for it in range(n_iters):
        batch = collect_rollout(policy, venv, cfg.n_steps, action_rng, cfg.gamma, cfg.lam, reward_norm)
        params, adam, m = train_iteration(batch, policy.params, cfg, spec, adam, shuffle_rng, it)
        policy.params = params
        metrics.extend(m.rows)
        stats = stats + m.stats
        ref_stats = ref_stats + m.ref_stats
        if m.hist_pos is not None:
            hist_pos = m.hist_pos if hist_pos is None else hist_pos + m.hist_pos
            hist_neg = m.hist_neg if hist_neg is None else hist_neg + m.hist_neg
        while len(venv.finished) >= next_eval:
            mean, std = evaluate(policy, eval_env, cfg.eval_episodes)
            evals.append({"episodes": next_eval, "mean_return": mean, "std_return": std})
            next_eval += cfg.eval_every
        if callback is not None:
            callback(it, policy, m)
        log.debug("iter %d: episodes=%d strict_pos=%.4f strict_neg=%.4f", it, len(venv.finished),
                  m.stats.frac_strict_pos, m.stats.frac_strict_neg)
    episodes = len(venv.finished)
    if not evals or evals[-1]["episodes"] != episodes:
        mean, std = evaluate(policy, eval_env, cfg.eval_episodes)
        evals.append({"episodes": episodes, "mean_return": mean, "std_return": std})
    return TrainReport(cfg, policy, metrics, evals, stats, hist_pos, hist_neg, episodes,
                       n_iters * cfg.rollout_size, n_iters, list(venv.finished), ref_stats)
