"""scikit-learn style wrapper around :func:`dclamp_ppo.trainer.train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .env import make_env
from .trainer import evaluate, preset_config, train

__all__ = ["PPOAgent"]


class PPOAgent(BaseEstimator):
    """On-policy agent for one of the bundled environments.

    ``fit`` ignores ``X`` and ``y``: the agent gathers its own data by
    interacting with ``env``. Hyperparameters not exposed here come from the
    environment preset.
    """

    def __init__(self, env="chain", variant="dclamp", epsilon=0.2, alpha=None, beta=None,
                 n_timesteps=100_000, lr=None, seed=0):
        self.env = env
        self.variant = variant
        self.epsilon = epsilon
        self.alpha = alpha
        self.beta = beta
        self.n_timesteps = n_timesteps
        self.lr = lr
        self.seed = seed

    def _config(self):
        overrides = dict(variant=self.variant, epsilon=self.epsilon, alpha=self.alpha, beta=self.beta,
                         n_timesteps=self.n_timesteps, seed=self.seed)
        if self.lr is not None:
            overrides["lr"] = self.lr
        return preset_config(self.env, **overrides)

    def fit(self, X=None, y=None):
        self.report_ = train(self._config())
        self.policy_ = self.report_.policy
        self.n_features_in_ = self.policy_.spec.obs_dim
        return self

    def predict(self, X):
        """Deterministic actions for a batch of raw observations."""
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.policy_.predict(X)

    def score(self, X=None, y=None, n_episodes=10):
        """Mean deterministic return over ``n_episodes`` fresh episodes."""
        check_is_fitted(self, "policy_")
        env = make_env(self.env, seed=self.seed + 20_000)
        return evaluate(self.policy_, env, n_episodes)[0]
