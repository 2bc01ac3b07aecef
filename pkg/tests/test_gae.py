import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from dclamp_ppo.gae import compute_gae, normalize_advantages


def test_two_step_example():
    buf = compute_gae([1.0, 0.0], [0.5, 0.5, 0.0], [False, False], 1.0, 1.0)
    np.testing.assert_allclose(buf.advantages, [0.5, -0.5], atol=1e-15)
    np.testing.assert_allclose(buf.value_targets, [1.0, 0.0], atol=1e-15)


def test_lambda_zero_is_td_residual(rng):
    r, v = rng.normal(size=10), rng.normal(size=11)
    d = rng.random(10) < 0.2
    buf = compute_gae(r, v, d, 0.9, 0.0)
    delta = r + 0.9 * v[1:] * (~d) - v[:-1]
    np.testing.assert_allclose(buf.advantages, delta, atol=1e-14)


def test_matches_double_sum_t16(rng):
    r, v = rng.normal(size=16), rng.normal(size=17)
    d = np.zeros(16, dtype=bool)
    d[[4, 11]] = True
    got = compute_gae(r, v, d, 0.98, 0.92).advantages
    np.testing.assert_allclose(got, oracles.gae_double_sum(r, v, d, 0.98, 0.92), rtol=0, atol=1e-10)


def test_reward_to_go_when_undiscounted(rng):
    r = rng.normal(size=12)
    buf = compute_gae(r, np.zeros(13), np.zeros(12, bool), 1.0, 1.0)
    np.testing.assert_allclose(buf.advantages, np.cumsum(r[::-1])[::-1], atol=1e-12)


def test_vectorised_columns_are_independent(rng):
    r, v = rng.normal(size=(20, 3)), rng.normal(size=(21, 3))
    d = rng.random((20, 3)) < 0.1
    both = compute_gae(r, v, d, 0.99, 0.95).advantages
    for j in range(3):
        col = compute_gae(r[:, j], v[:, j], d[:, j], 0.99, 0.95).advantages
        np.testing.assert_array_equal(both[:, j], col)


def test_episode_isolation(rng):
    r, v = rng.normal(size=20), rng.normal(size=21)
    d = np.zeros(20, bool)
    d[9] = True
    a = compute_gae(r, v, d, 0.99, 0.95).advantages
    r2, v2 = r.copy(), v.copy()
    r2[10:] += 100.0
    v2[10:] -= 50.0
    b = compute_gae(r2, v2, d, 0.99, 0.95).advantages
    np.testing.assert_array_equal(a[:10], b[:10])


@pytest.mark.parametrize("bad", [
    dict(rewards=np.zeros(3), values=np.zeros(3), dones=np.zeros(3)),
    dict(rewards=np.zeros(3), values=np.zeros(4), dones=np.zeros(2)),
])
def test_length_mismatch(bad):
    with pytest.raises(ValueError):
        compute_gae(gamma=0.9, lam=0.9, **bad)


@pytest.mark.parametrize("x,expected", [
    ((1, -1), (1, -1)),
    ((5, 5, 5), (0, 0, 0)),
    ((0, 2, 4), (-1.224744871391589, 0, 1.224744871391589)),
])
def test_normalize_examples(x, expected):
    np.testing.assert_allclose(normalize_advantages(np.array(x, float)), expected, atol=1e-7)


def test_normalize_needs_two():
    with pytest.raises(ValueError):
        normalize_advantages(np.array([1.0]))


@given(st.integers(1, 64), st.floats(0.5, 1.0), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_recursion_equals_double_sum(T, gamma, lam, seed):
    g = np.random.default_rng(seed)
    r, v = g.normal(size=T), g.normal(size=T + 1)
    d = g.random(T) < 0.15
    got = compute_gae(r, v, d, gamma, lam)
    want = oracles.gae_double_sum(r, v, d, gamma, lam)
    np.testing.assert_allclose(got.advantages, want, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got.value_targets, got.advantages + v[:-1], atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_normalized_moments(xs):
    x = np.array(xs)
    out = normalize_advantages(x)
    if x.std() > 1e-3:
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1) < 1e-6
    # standardisation is monotone
    assert np.all(np.diff(out[np.argsort(x, kind="stable")]) >= 0)
