"""Empirical check that one DClamp ascent step pulls strictly-wrong ratios toward 1.

Setting: parameters ``theta0``, a batch whose ratios ``w_i(theta0)`` are not all 1,
and advantages ``A_i``. ``omega`` holds the strictly-wrong samples. For a target
``t`` in ``omega`` satisfying the alignment condition

    sum_{t' in omega} <grad w_t, grad w_t'> A_t A_t' > 0,

a single full-batch ascent step of size ``eta`` on the DClamp objective should
leave ``w_t`` closer to 1 than the same step on the PPO objective, for all
small enough ``eta``.

Two ratio models are provided: a one-parameter two-action softmax with
closed-form gradients, and the MLP actor from :mod:`dclamp_ppo.nn`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .nn import PolicySpec, init_params, log_prob, logprob_jacobian, loss_and_grad, policy_dist
from .surrogate import SurrogateConfig, Variant, direction_codes, Direction, surrogate_grad_w

__all__ = [
    "SigmoidRatioModel",
    "MLPRatioModel",
    "LemmaInstance",
    "StepComparison",
    "InstanceReport",
    "LemmaReport",
    "DEFAULT_ETA_GRID",
    "alignment_condition",
    "one_step_compare",
    "phi_prime",
    "sweep",
    "sigmoid_instance",
    "random_chain_instance",
    "run_suite",
    "eta_grid",
]

DEFAULT_ETA_GRID = tuple(10.0**k for k in range(-6, 0))


def eta_grid(lo: float, hi: float, factor: float) -> tuple[float, ...]:
    """Geometric grid ``lo, lo*factor, ...`` up to ``hi`` inclusive."""
    if not (lo > 0 and hi >= lo and factor > 1):
        raise ValueError(f"empty or invalid eta grid {lo}:{hi}:{factor}")
    out, x = [], lo
    while x <= hi * (1 + 1e-9):
        out.append(x)
        x *= factor
    return tuple(out)


class SigmoidRatioModel:
    """Two actions with logits ``(theta, 0)``; sample ``i`` took ``actions[i]``.

    ``p_old[i]`` is the behaviour probability of that action.
    """

    n_params = 1

    def __init__(self, actions, p_old):
        self.actions = np.asarray(actions, dtype=int)
        self.p_old = np.asarray(p_old, dtype=float)

    def _probs(self, theta):
        s = 1.0 / (1.0 + np.exp(-float(np.asarray(theta).reshape(-1)[0])))
        return np.where(self.actions == 0, s, 1.0 - s), s

    def ratios(self, theta):
        p, _ = self._probs(theta)
        return p / self.p_old

    def ratio_grads(self, theta):
        _, s = self._probs(theta)
        d = s * (1.0 - s)
        return (np.where(self.actions == 0, d, -d) / self.p_old)[:, None]

    def objective_grad(self, theta, cfg: SurrogateConfig, advantages):
        w = self.ratios(theta)
        slopes = surrogate_grad_w(cfg, w, advantages)
        return (slopes[:, None] * self.ratio_grads(theta)).mean(axis=0)


class MLPRatioModel:
    """Ratios of an MLP actor against fixed behaviour log-probabilities.

    ``theta`` is the flat parameter array with the layout of ``template``.
    The objective gradient goes through :func:`dclamp_ppo.nn.loss_and_grad`
    with the value and entropy terms switched off.
    """

    def __init__(self, spec: PolicySpec, template, obs, actions, logprob_old):
        self.spec = spec
        self.template = template
        self.obs = np.asarray(obs, dtype=float)
        self.actions = np.asarray(actions)
        self.logprob_old = np.asarray(logprob_old, dtype=float)
        self.n_params = len(template)

    def _params(self, theta):
        return self.template.with_values(theta)

    def ratios(self, theta):
        dist = policy_dist(self._params(theta), self.spec, self.obs)
        return np.exp(log_prob(dist, self.actions) - self.logprob_old)

    def ratio_grads(self, theta):
        logp, jac = logprob_jacobian(self._params(theta), self.spec, self.obs, self.actions)
        return np.exp(logp - self.logprob_old)[:, None] * jac

    def objective_grad(self, theta, cfg: SurrogateConfig, advantages):
        batch = SimpleNamespace(
            obs=self.obs, actions=self.actions, logprob_old=self.logprob_old,
            advantages=np.asarray(advantages, dtype=float), value_targets=np.zeros(len(self.obs)),
        )
        info = loss_and_grad(self._params(theta), self.spec, batch, cfg, 0.0, 0.0)
        return -info.grad.values


@dataclass
class LemmaInstance:
    model: object
    theta0: np.ndarray
    advantages: np.ndarray
    target: int
    epsilon: float = 0.2
    alpha: float = 3.0
    beta: float = 0.2
    omega: np.ndarray = field(init=False)

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        self.advantages = np.asarray(self.advantages, dtype=float)
        w = self.model.ratios(self.theta0)
        codes = direction_codes(w, self.advantages, self.beta)
        self.omega = np.flatnonzero(codes == Direction.STRICT_WRONG)
        if self.target not in self.omega:
            raise ValueError(f"target sample {self.target} is not strictly wrong at theta0 (w={w[self.target]:.6g})")

    @property
    def ppo(self) -> SurrogateConfig:
        return SurrogateConfig(Variant.PPO, self.epsilon, beta=self.beta)

    @property
    def dclamp(self) -> SurrogateConfig:
        return SurrogateConfig(Variant.DCLAMP, self.epsilon, self.alpha, self.beta)

    @property
    def mirrored(self) -> bool:
        """True for the ``A < 0, w > 1 + beta`` case."""
        return bool(self.advantages[self.target] < 0)

    def to_dict(self):
        return {
            "theta0": self.theta0.tolist(),
            "advantages": self.advantages.tolist(),
            "omega": self.omega.tolist(),
            "target": int(self.target),
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "beta": self.beta,
        }


def alignment_condition(inst: LemmaInstance) -> float:
    G = inst.model.ratio_grads(inst.theta0)
    A = inst.advantages
    t = inst.target
    inner = G[inst.omega] @ G[t]
    return float(np.sum(inner * A[t] * A[inst.omega]))


@dataclass
class StepComparison:
    eta: float
    w_ppo: float
    w_dclamp: float

    @property
    def gap(self) -> float:
        return (self.w_dclamp - 1.0) ** 2 - (self.w_ppo - 1.0) ** 2


def _stepped_ratio(inst, cfg, eta):
    theta1 = inst.theta0 + eta * inst.model.objective_grad(inst.theta0, cfg, inst.advantages)
    return float(inst.model.ratios(theta1)[inst.target])


def one_step_compare(inst: LemmaInstance, eta: float) -> StepComparison:
    """Target ratio after one ascent step under PPO and under DClamp."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    w_p = _stepped_ratio(inst, inst.ppo, eta)
    w_d = _stepped_ratio(inst, inst.dclamp, eta)
    if not (np.isfinite(w_p) and np.isfinite(w_d)):
        raise FloatingPointError(f"non-finite ratio after a step of size {eta}")
    return StepComparison(eta, w_p, w_d)


def phi_prime(inst: LemmaInstance, h: float = 1e-7) -> dict:
    """Slope at ``eta = 0`` of ``w_dclamp(eta) - w_ppo(eta)`` for the target.

    Returns the central-difference estimate together with the exact value
    ``grad w_t . (grad J_dclamp - grad J_ppo)`` and the two closed forms of
    ``(alpha - 1) * mean <grad w_t, grad w_t'> A_t'`` over ``omega``, one
    averaged over the whole batch and one over ``omega`` only.
    """
    def phi(eta):
        return _stepped_ratio(inst, inst.dclamp, eta) - _stepped_ratio(inst, inst.ppo, eta)

    fd = (phi(h) - phi(-h)) / (2.0 * h)
    G = inst.model.ratio_grads(inst.theta0)
    gJd = inst.model.objective_grad(inst.theta0, inst.dclamp, inst.advantages)
    gJp = inst.model.objective_grad(inst.theta0, inst.ppo, inst.advantages)
    t = inst.target
    weighted = float(np.sum((G[inst.omega] @ G[t]) * inst.advantages[inst.omega]))
    n = len(inst.advantages)
    return {
        "finite_difference": float(fd),
        "exact": float(G[t] @ (gJd - gJp)),
        "closed_form_batch_mean": (inst.alpha - 1.0) * weighted / n,
        "closed_form_omega_mean": (inst.alpha - 1.0) * weighted / len(inst.omega),
    }


@dataclass
class InstanceReport:
    alignment: float
    etas: list[float]
    gaps: list[float]
    phi: dict
    mirrored: bool
    instance: dict

    @property
    def passed(self) -> bool:
        """Gap is negative at the smallest step size."""
        return self.gaps[0] < 0

    @property
    def phi_sign_ok(self) -> bool:
        fd = self.phi["finite_difference"]
        return fd < 0 if self.mirrored else fd > 0

    @property
    def eta_bar_estimate(self) -> float | None:
        """Largest grid step such that every smaller grid step also has a negative gap."""
        best = None
        for eta, gap in zip(self.etas, self.gaps):
            if gap >= 0:
                break
            best = eta
        return best

    def to_dict(self):
        return {
            "alignment": self.alignment,
            "eta_grid": self.etas,
            "gaps": self.gaps,
            "pass": bool(self.passed),
            "eta_bar_estimate": self.eta_bar_estimate,
            "phi_prime": self.phi,
            "phi_sign_ok": bool(self.phi_sign_ok),
            "mirrored": bool(self.mirrored),
            "instance": self.instance,
        }


def sweep(inst: LemmaInstance, etas=DEFAULT_ETA_GRID) -> InstanceReport:
    etas = sorted(float(e) for e in etas)
    if not etas:
        raise ValueError("empty eta grid")
    align = alignment_condition(inst)
    if not align > 0:
        raise ValueError(f"alignment condition fails ({align:.3g} <= 0); instance rejected")
    gaps = [one_step_compare(inst, eta).gap for eta in etas]
    return InstanceReport(align, etas, gaps, phi_prime(inst), inst.mirrored, inst.to_dict())


def sigmoid_instance(p_old, w0, advantages, target=0, actions=None, epsilon=0.2, alpha=3.0, beta=0.2):
    """Instance on :class:`SigmoidRatioModel` with a shared ``theta0``.

    ``w0`` is the desired ratio of sample 0; ``theta0`` is solved from it.
    """
    p_old = np.atleast_1d(np.asarray(p_old, dtype=float))
    actions = np.zeros(p_old.size, dtype=int) if actions is None else np.asarray(actions, dtype=int)
    p0 = w0 * p_old[0]
    s = p0 if actions[0] == 0 else 1.0 - p0
    theta0 = np.log(s / (1.0 - s))
    model = SigmoidRatioModel(actions, p_old)
    return LemmaInstance(model, np.array([theta0]), advantages, target, epsilon, alpha, beta)


CHAIN_LEMMA_SPEC = PolicySpec(obs_dim=16, action_dim=2, discrete=True, pi_hidden=(2,), vf_hidden=(),
                              activation="tanh", ortho_init=False)


def random_chain_instance(rng, n_samples=12, epsilon=0.2, alpha=3.0, beta=0.2, spread=1.0,
                          max_tries=1000) -> LemmaInstance:
    """Random valid instance for a small categorical actor on ChainWalk states.

    The behaviour policy and a perturbed current policy are drawn at random;
    advantage signs are chosen so that several samples are strictly wrong,
    and the target is a strictly-wrong sample satisfying the alignment
    condition.
    """
    spec = CHAIN_LEMMA_SPEC
    for _ in range(max_tries):
        old = init_params(spec, rng)
        states = rng.integers(0, spec.obs_dim, size=n_samples)
        obs = np.eye(spec.obs_dim)[states]
        dist_old = policy_dist(old, spec, obs)
        actions = dist_old.sample(rng)
        logp_old = log_prob(dist_old, actions)
        actor = np.array([n.startswith("pi.") for n in old.names for _ in range(old[n].size)])
        theta0 = old.values + spread * rng.standard_normal(len(old)) * actor
        model = MLPRatioModel(spec, old, obs, actions, logp_old)
        w = model.ratios(theta0)
        strict_sign = np.where(w < 1 - beta, 1.0, np.where(w > 1 + beta, -1.0, 0.0))
        signs = rng.choice([-1.0, 1.0], size=n_samples)
        use_strict = (strict_sign != 0) & (rng.random(n_samples) < 0.7)
        signs = np.where(use_strict, strict_sign, signs)
        adv = signs * rng.uniform(0.1, 2.0, size=n_samples)
        omega = np.flatnonzero(direction_codes(w, adv, beta) == Direction.STRICT_WRONG)
        if omega.size == 0:
            continue
        G = model.ratio_grads(theta0)
        for t in rng.permutation(omega):
            if np.sum((G[omega] @ G[t]) * adv[t] * adv[omega]) > 0:
                return LemmaInstance(model, theta0, adv, int(t), epsilon, alpha, beta)
    raise RuntimeError("could not draw a valid lemma instance")


@dataclass
class LemmaReport:
    instances: list[InstanceReport]
    seed: int
    etas: list[float]

    @property
    def pass_rate(self) -> float:
        return float(np.mean([r.passed for r in self.instances])) if self.instances else 0.0

    @property
    def phi_pass_rate(self) -> float:
        return float(np.mean([r.phi_sign_ok for r in self.instances])) if self.instances else 0.0

    @property
    def eta_bar_estimate(self) -> float | None:
        """Smallest per-instance threshold estimate, i.e. one step size valid for all."""
        vals = [r.eta_bar_estimate for r in self.instances]
        if not vals or any(v is None for v in vals):
            return None
        return min(vals)

    def to_dict(self):
        return {
            "seed": self.seed,
            "eta_grid": list(self.etas),
            "n_instances": len(self.instances),
            "pass_rate": self.pass_rate,
            "phi_pass_rate": self.phi_pass_rate,
            "eta_bar_estimate": self.eta_bar_estimate,
            "instances": [r.to_dict() for r in self.instances],
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def run_suite(n_instances: int, seed: int = 0, etas=DEFAULT_ETA_GRID, **instance_kw) -> LemmaReport:
    """Sweep ``n_instances`` random instances drawn on a small ChainWalk actor."""
    root = np.random.SeedSequence(seed)
    reports = []
    for child in root.spawn(n_instances):
        rng = np.random.default_rng(child)
        reports.append(sweep(random_chain_instance(rng, **instance_kw), etas))
    return LemmaReport(reports, seed, sorted(float(e) for e in etas))
