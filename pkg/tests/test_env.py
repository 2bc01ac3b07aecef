from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from dclamp_ppo.env import ChainWalk, PointReach, RewardNormalizer, RunningNorm, VecEnv, format_trajectory, make_env
from dclamp_ppo.surrogate import ConfigError

GOLDEN = Path(__file__).parent / "data" / "point_reach_seed0.txt"
GOLDEN_ACTIONS = [(1.0, 0.0), (0.5, -0.5), (-1.0, 1.0), (2.0, -3.0), (0.0, 0.0), (0.3, 0.7), (-0.2, -0.9),
                  (1.0, 1.0), (-0.6, 0.1), (0.25, -0.75)]


def test_point_reset_deterministic():
    np.testing.assert_array_equal(PointReach(seed=0).reset(), PointReach(seed=0).reset())


def test_point_seeds_differ():
    for s in range(100):
        assert not np.array_equal(PointReach(seed=s).reset(), PointReach(seed=s + 100).reset())


def test_chain_starts_left():
    for s in range(5):
        obs = ChainWalk(seed=s).reset()
        assert obs[0] == 1.0 and obs.sum() == 1.0


def test_point_at_goal():
    env = PointReach(seed=0)
    env.set_state([0.0, 0.0])
    _, r, done = env.step([0.0, 0.0])
    assert r == pytest.approx(0.0) and done


def test_chain_rightmost_pays():
    env = ChainWalk(seed=0)
    env.set_state(15)
    assert env.step(1)[1] == 1.0
    env.set_state(3)
    assert env.step(1)[1] == 0.0


def test_golden_trajectory():
    env = PointReach(seed=0)
    rows = [(0, env.reset(), 0.0, False)]
    for t, a in enumerate(GOLDEN_ACTIONS, 1):
        obs, r, d = env.step(a)
        rows.append((t, obs, r, d))
    assert format_trajectory(rows) == GOLDEN.read_text()


def test_unknown_env():
    with pytest.raises(ConfigError):
        make_env("Ant-v4")


@pytest.mark.parametrize("bad", [[1.0], [np.nan, 0.0], [0.0, 0.0, 0.0]])
def test_point_rejects_bad_action(bad):
    with pytest.raises(ValueError):
        PointReach(seed=0).step(bad)


@pytest.mark.parametrize("bad", [2, -1, [0, 1]])
def test_chain_rejects_bad_action(bad):
    with pytest.raises(ValueError):
        ChainWalk(seed=0).step(bad)


@given(st.integers(0, 2**31), st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=40))
def test_point_reward_bounds(seed, actions):
    env = PointReach(seed=seed)
    env.reset()
    for a in actions:
        _, r, done = env.step(a)
        assert -(env.diag + 0.02) <= r <= 0
        if done:
            break


@given(st.integers(0, 2**31), st.lists(st.integers(0, 1), min_size=64, max_size=64))
def test_chain_return_bounds_and_replay(seed, actions):
    def run():
        env = ChainWalk(seed=seed)
        env.reset()
        return [env.step(a) for a in actions]
    a, b = run(), run()
    total = sum(r for _, r, _ in a)
    assert 0 <= total <= 64
    assert a[-1][2] and not any(d for _, _, d in a[:-1])
    assert all(np.array_equal(x[0], y[0]) and x[1:] == y[1:] for x, y in zip(a, b))


def test_chain_random_policy_value_matches_oracle():
    env = ChainWalk(seed=0)
    assert env.policy_value(0.5) == pytest.approx(oracles.chain_random_value(16, 64, 0.1), abs=1e-12)
    assert env.policy_value(1.0) == pytest.approx(oracles.chain_random_value(16, 64, 0.1, 1.0), abs=1e-12)


def test_chain_random_policy_monte_carlo():
    env, g = ChainWalk(seed=3), np.random.default_rng(3)
    returns = []
    for _ in range(4000):
        env.reset()
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(int(g.integers(0, 2)))
            total += r
        returns.append(total)
    se = np.std(returns) / np.sqrt(len(returns))
    assert abs(np.mean(returns) - env.policy_value(0.5)) < 3 * se + 1e-12


def test_vec_env_matches_sequential():
    venv = VecEnv("chain", 3, seed=10)
    venv.reset()
    singles = [ChainWalk(seed=10 + i) for i in range(3)]
    for e in singles:
        e.reset()
    g = np.random.default_rng(0)
    for _ in range(150):
        acts = g.integers(0, 2, size=3)
        obs, rew, done = venv.step(acts)
        for i, e in enumerate(singles):
            o, r, d = e.step(acts[i])
            if d:
                o = e.reset()
            np.testing.assert_array_equal(obs[i], o)
            assert rew[i] == r and done[i] == d
    assert len(venv.finished) == 6


class TestRunningNorm:
    def test_constant_samples(self):
        n = RunningNorm(())
        n.update(np.ones(3))
        assert n.apply(1.0) == 0.0

    def test_identity_before_data(self):
        n = RunningNorm((2,), clip=5.0)
        np.testing.assert_array_equal(n.apply([3.0, -7.0]), [3.0, -5.0])

    def test_standard_normal_stream(self):
        n = RunningNorm(())
        x = np.random.default_rng(0).standard_normal(1000)
        for chunk in np.array_split(x, 37):
            n.update(chunk)
        assert abs(n.mean) < 0.1 and abs(n.var - 1) < 0.15
        assert n.mean == pytest.approx(x.mean(), abs=1e-12)
        assert n.var == pytest.approx(x.var(), abs=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=60), st.floats(-50, 50))
    def test_apply_unapply(self, xs, y):
        n = RunningNorm((), clip=1e9)
        n.update(np.array(xs))
        assert n.unapply(n.apply(y)) == pytest.approx(y, abs=1e-9 * max(1.0, abs(y)) + 1e-9 * np.sqrt(n.var + n.eps))
        assert n.var >= 0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(-1e6, 1e6))
    def test_apply_finite(self, xs, y):
        n = RunningNorm(())
        n.update(np.array(xs))
        assert np.isfinite(n.apply(y))


def test_reward_normalizer_divides_by_return_std():
    rn = RewardNormalizer(1, gamma=0.9)
    for r in [1.0, 2.0, 0.5, 1.5]:
        rn.update(np.array([r]), np.array([False]))
    ret, rets = 0.0, []
    for r in [1.0, 2.0, 0.5, 1.5]:
        ret = 0.9 * ret + r
        rets.append(ret)
    assert rn.apply(np.array([2.0]))[0] == pytest.approx(2.0 / np.sqrt(np.var(rets) + 1e-8))
