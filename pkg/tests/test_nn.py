import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gradcheck import max_relative_error, random_checked_problem
from dclamp_ppo.nn import (
    AdamState,
    MLPArch,
    ParamVector,
    PolicyDist,
    PolicySpec,
    adam_step,
    clip_grad_norm,
    entropy,
    init_params,
    load_checkpoint,
    log_prob,
    logprob_jacobian,
    loss_and_grad,
    mlp_forward,
    ortho_init,
    policy_dist,
    save_checkpoint,
)
from dclamp_ppo.surrogate import SurrogateConfig


def _arch_params(sizes, rng, scale=0.5):
    arch = MLPArch(sizes)
    arrays = {}
    for k in range(arch.n_layers):
        arrays[arch.weight(k)] = scale * rng.standard_normal((sizes[k], sizes[k + 1]))
        arrays[arch.bias(k)] = scale * rng.standard_normal(sizes[k + 1])
    return arch, ParamVector.from_arrays(arrays)


class TestForward:
    def test_zero_network_outputs_zero(self):
        arch = MLPArch((3, 5, 2))
        params = ParamVector.from_arrays({"l0.W": np.zeros((3, 5)), "l0.b": np.zeros(5),
                                          "l1.W": np.zeros((5, 2)), "l1.b": np.zeros(2)})
        np.testing.assert_array_equal(mlp_forward(params, np.array([[1.0, -2.0, 3.0]]), arch), 0.0)

    def test_identity_layer(self):
        arch = MLPArch((2, 2))
        params = ParamVector.from_arrays({"l0.W": np.eye(2), "l0.b": np.zeros(2)})
        np.testing.assert_array_equal(mlp_forward(params, np.array([[1.0, 2.0]]), arch), [[1.0, 2.0]])

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_matches_scalar_oracle(self, act):
        W0 = [[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]]
        b0 = [0.01, -0.02, 0.03]
        W1 = [[0.7], [-0.8], [0.9]]
        b1 = [0.05]
        arch = MLPArch((2, 3, 1), act)
        params = ParamVector.from_arrays({"l0.W": np.array(W0), "l0.b": np.array(b0),
                                          "l1.W": np.array(W1), "l1.b": np.array(b1)})
        got = mlp_forward(params, np.array([[0.5, -0.5]]), arch)[0]
        want = oracles.mlp_forward([(W0, b0), (W1, b1)], [0.5, -0.5], act)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)

    def test_random_nets_match_oracle(self, rng):
        for _ in range(20):
            sizes = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(2, 5))))
            arch, params = _arch_params(sizes, rng)
            x = rng.normal(size=sizes[0])
            layers = [(params[arch.weight(k)].tolist(), params[arch.bias(k)].tolist()) for k in range(arch.n_layers)]
            np.testing.assert_allclose(mlp_forward(params, x[None], arch)[0], oracles.mlp_forward(layers, x),
                                       rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self):
        arch = MLPArch((3, 2))
        params = ParamVector.from_arrays({"l0.W": np.zeros((3, 2)), "l0.b": np.zeros(2)})
        with pytest.raises(ValueError):
            mlp_forward(params, np.zeros((1, 4)), arch)


class TestDistributions:
    def test_log_prob_examples(self):
        assert log_prob(PolicyDist("gaussian", [[0.0]], [0.0]), [[0.0]])[0] == pytest.approx(-0.9189385332, abs=1e-9)
        assert log_prob(PolicyDist("categorical", [[0.0, 0.0]]), [0])[0] == pytest.approx(math.log(0.5), abs=1e-12)
        d = PolicyDist("gaussian", [[1.0]], [math.log(0.5)])
        assert log_prob(d, [[1.0]])[0] == pytest.approx(-math.log(0.5) - 0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_entropy_examples(self):
        assert entropy(PolicyDist("gaussian", [[0.0]], [0.0]))[0] == pytest.approx(1.4189385332, abs=1e-9)
        assert entropy(PolicyDist("categorical", [[0.0, 0.0]]))[0] == pytest.approx(math.log(2), abs=1e-12)
        assert entropy(PolicyDist("categorical", [[0.0, -800.0]]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_non_finite_parameters(self):
        with pytest.raises(FloatingPointError):
            PolicyDist("gaussian", [[np.nan]], [0.0])

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_categorical_normalised(self, logits):
        p = PolicyDist("categorical", [logits]).probs()
        assert abs(p.sum() - 1) < 1e-9

    def test_gaussian_log_prob_multidim(self, rng):
        mu, ls, a = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        want = sum(-0.5 * ((a[i] - mu[i]) / math.exp(ls[i])) ** 2 - ls[i] - 0.5 * math.log(2 * math.pi) for i in range(3))
        assert log_prob(PolicyDist("gaussian", [mu], ls), [a])[0] == pytest.approx(want, abs=1e-12)

    def test_self_ratio_is_one(self, rng):
        spec = PolicySpec(3, 2, False, (4,), (4,))
        params = init_params(spec, rng)
        d = policy_dist(params, spec, rng.normal(size=(5, 3)))
        a = d.sample(rng)
        np.testing.assert_array_equal(np.exp(log_prob(d, a) - log_prob(d, a)), 1.0)


def _batch(rng, spec, params, n=8, old_shift=0.0):
    obs = rng.normal(size=(n, spec.obs_dim))
    d = policy_dist(params, spec, obs)
    a = d.sample(rng)
    return SimpleNamespace(obs=obs, actions=a, logprob_old=log_prob(d, a) + old_shift,
                           advantages=rng.normal(size=n), value_targets=rng.normal(size=n))


class TestLossAndGrad:
    def test_unit_ratios_give_vanilla_policy_gradient(self, rng):
        spec = PolicySpec(3, 3, True, (5,), (5,))
        params = init_params(spec, rng)
        batch = _batch(rng, spec, params)
        info = loss_and_grad(params, spec, batch, SurrogateConfig("ppo", 0.2), 0.0, 0.0)
        assert info.policy_loss == pytest.approx(-batch.advantages.mean(), abs=1e-14)
        np.testing.assert_array_equal(info.ratios, 1.0)
        _, jac = logprob_jacobian(params, spec, batch.obs, batch.actions)
        pg = (batch.advantages[:, None] * jac).mean(axis=0)
        np.testing.assert_allclose(-info.grad.values, pg, atol=1e-14)

    def test_flat_clipped_sample_has_zero_actor_gradient(self, rng):
        spec = PolicySpec(2, 2, True, (3,), (3,))
        params = init_params(spec, rng)
        batch = _batch(rng, spec, params, n=1, old_shift=-math.log(1.5))
        batch.advantages = np.array([1.0])
        info = loss_and_grad(params, spec, batch, SurrogateConfig("ppo", 0.2), 0.0, 0.0)
        assert info.ratios[0] == pytest.approx(1.5)
        np.testing.assert_array_equal(info.grad.values, 0.0)

    @pytest.mark.parametrize("variant", ["ppo", "leaky", "rb", "dclamp"])
    def test_finite_differences(self, variant):
        g = np.random.default_rng(["ppo", "leaky", "rb", "dclamp"].index(variant))
        for _ in range(5):
            assert max_relative_error(*random_checked_problem(g, variant)) < 1e-4

    def test_relu_finite_differences(self, rng):
        spec = PolicySpec(3, 2, False, (6,), (6,), activation="relu")
        params = init_params(spec, rng)
        batch = _batch(rng, spec, params, n=6, old_shift=0.05)
        assert max_relative_error(spec, params, batch, SurrogateConfig("dclamp", 0.2), 0.5, 0.01) < 1e-4

    def test_deterministic(self, rng):
        spec, params, batch, cfg, c_vf, c_ent = random_checked_problem(rng)
        a = loss_and_grad(params, spec, batch, cfg, c_vf, c_ent)
        b = loss_and_grad(params, spec, batch, cfg, c_vf, c_ent)
        assert a.loss == b.loss
        np.testing.assert_array_equal(a.grad.values, b.grad.values)

    def test_empty_batch(self, rng):
        spec = PolicySpec(2, 2, True, (3,), (3,))
        params = init_params(spec, rng)
        empty = SimpleNamespace(obs=np.zeros((0, 2)), actions=np.zeros(0, int), logprob_old=np.zeros(0),
                                advantages=np.zeros(0), value_targets=np.zeros(0))
        with pytest.raises(ValueError):
            loss_and_grad(params, spec, empty, SurrogateConfig("ppo", 0.2), 0.5, 0.0)

    def test_non_finite_loss_names_sample(self, rng):
        spec = PolicySpec(2, 2, True, (3,), (3,))
        params = init_params(spec, rng)
        batch = _batch(rng, spec, params, n=4)
        batch.value_targets = np.array([0.0, 0.0, np.inf, 0.0])
        with pytest.raises(FloatingPointError, match="sample 2"):
            loss_and_grad(params, spec, batch, SurrogateConfig("ppo", 0.2), 0.5, 0.0)

    def test_jacobian_matches_finite_differences(self, rng):
        spec = PolicySpec(4, 2, False, (5,), ())
        params = init_params(spec, rng)
        obs = rng.normal(size=(3, 4))
        a = policy_dist(params, spec, obs).sample(rng)
        _, jac = logprob_jacobian(params, spec, obs, a)
        h = 1e-6
        for j in range(len(params)):
            e = np.zeros(len(params))
            e[j] = h
            up = log_prob(policy_dist(params.with_values(params.values + e), spec, obs), a)
            dn = log_prob(policy_dist(params.with_values(params.values - e), spec, obs), a)
            np.testing.assert_allclose(jac[:, j], (up - dn) / (2 * h), atol=1e-6)


class TestAdam:
    def _pv(self, x):
        return ParamVector.from_arrays({"x": np.asarray(x, float)})

    def test_first_step_moves_by_lr(self):
        p, s = adam_step(self._pv(np.zeros(4)), np.ones(4), AdamState.zeros(4), 1e-3)
        np.testing.assert_allclose(p.values, -1e-3 / (1 + 1e-8), rtol=1e-12)
        assert s.t == 1

    def test_zero_gradient(self):
        p, s = adam_step(self._pv([1.0, 2.0]), np.zeros(2), AdamState.zeros(2), 1e-3)
        np.testing.assert_array_equal(p.values, [1.0, 2.0])
        assert s.t == 1

    def test_matches_scalar_recurrence(self, rng):
        grads = rng.normal(size=6)
        p, s = self._pv([0.3]), AdamState.zeros(1)
        want = oracles.adam_scalar(0.3, grads, 1e-3)
        for g, w in zip(grads, want):
            p, s = adam_step(p, np.array([g]), s, 1e-3)
            assert p.values[0] == pytest.approx(w, rel=1e-14, abs=1e-16)

    def test_two_constant_steps(self):
        p, s = self._pv([0.0]), AdamState.zeros(1)
        for _ in range(2):
            p, s = adam_step(p, np.array([1.0]), s, 1e-3)
        assert p.values[0] == pytest.approx(oracles.adam_scalar(0.0, [1.0, 1.0], 1e-3)[-1], rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(self._pv([0.0, 0.0]), np.zeros(3), AdamState.zeros(2), 1e-3)

    def test_slice_order_is_metadata(self, rng):
        a, b, g1, g2 = (rng.normal(size=3) for _ in range(4))
        pv1 = ParamVector.from_arrays({"a": a, "b": b})
        pv2 = ParamVector.from_arrays({"b": b, "a": a})
        out1, _ = adam_step(pv1, np.concatenate([g1, g2]), AdamState.zeros(6), 1e-2)
        out2, _ = adam_step(pv2, np.concatenate([g2, g1]), AdamState.zeros(6), 1e-2)
        np.testing.assert_array_equal(out1["a"], out2["a"])
        np.testing.assert_array_equal(out1["b"], out2["b"])


class TestClipAndInit:
    @pytest.mark.parametrize("g,m,want", [((3, 4), 5, (3, 4)), ((3, 4), 2.5, (1.5, 2.0)), ((0, 0), 1, (0, 0))])
    def test_clip_examples(self, g, m, want):
        np.testing.assert_allclose(clip_grad_norm(np.array(g, float), m), want, rtol=1e-15)

    def test_ortho_square(self, rng):
        q = ortho_init(4, 4, 1.0, rng)
        np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-8)

    def test_ortho_zero_gain(self, rng):
        np.testing.assert_array_equal(ortho_init(3, 5, 0.0, rng), 0.0)

    def test_ortho_wide_gram(self, rng):
        q = ortho_init(2, 4, math.sqrt(2), rng)
        np.testing.assert_allclose(q @ q.T, 2 * np.eye(2), atol=1e-8)

    @given(st.integers(1, 8), st.integers(1, 8), st.floats(0.1, 3))
    def test_ortho_smaller_side_orthonormal(self, r, c, gain):
        q = ortho_init(r, c, gain, np.random.default_rng(r * 31 + c))
        gram = q @ q.T if r <= c else q.T @ q
        np.testing.assert_allclose(gram, gain**2 * np.eye(min(r, c)), atol=1e-8)

    def test_log_std_initialised(self, rng):
        params = init_params(PolicySpec(3, 2, False), rng)
        np.testing.assert_array_equal(params["pi.log_std"], -2.0)
        assert "pi.log_std" not in init_params(PolicySpec(3, 2, True), rng)

    def test_non_finite_parameters_rejected(self):
        with pytest.raises(FloatingPointError):
            ParamVector.from_arrays({"x": np.array([1.0, np.inf])})


def test_checkpoint_round_trip(tmp_path, rng):
    spec = PolicySpec(3, 2, False, (4, 4), (4,))
    params = init_params(spec, rng)
    params = params.with_values(params.values + rng.normal(size=len(params)) * 1e-3)
    save_checkpoint(tmp_path / "ck.json", params, spec, {"note": 1})
    back, spec2, extra = load_checkpoint(tmp_path / "ck.json")
    np.testing.assert_array_equal(back.values, params.values)
    assert back.names == params.names and spec2 == spec and extra == {"note": 1}
