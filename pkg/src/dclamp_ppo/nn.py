"""Small actor/critic networks with hand-written reverse-mode gradients.

Parameters for both networks live in one flat :class:`ParamVector`. The actor
and critic are separate MLPs. Continuous actions use a diagonal Gaussian with
a state-independent ``log_std`` vector; discrete actions use a categorical
over the actor's logits.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from .surrogate import SurrogateConfig, surrogate_value_and_slope

__all__ = [
    "ParamVector",
    "Slice",
    "MLPArch",
    "PolicySpec",
    "PolicyDist",
    "AdamState",
    "LossInfo",
    "mlp_forward",
    "init_params",
    "ortho_init",
    "policy_dist",
    "value_forward",
    "log_prob",
    "entropy",
    "loss_and_grad",
    "logprob_jacobian",
    "adam_step",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "dclamp-ppo-checkpoint"


@dataclass(frozen=True)
class Slice:
    name: str
    shape: tuple[int, ...]
    start: int
    stop: int


class ParamVector:
    """Flat float64 array with an immutable layout of named, shaped slices."""

    __slots__ = ("values", "layout", "_index")

    def __init__(self, values, layout):
        values = np.asarray(values, dtype=float)
        layout = tuple(layout)
        total = sum(s.stop - s.start for s in layout)
        if values.ndim != 1 or values.size != total:
            raise ValueError(f"layout describes {total} scalars, got array of shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("parameter vector contains non-finite values")
        self.values = values
        self.layout = layout
        self._index = {s.name: s for s in layout}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float)
            layout.append(Slice(name, tuple(arr.shape), offset, offset + arr.size))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def __len__(self):
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        s = self._index[name]
        return self.values[s.start : s.stop].reshape(s.shape)

    def __contains__(self, name):
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=float), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {s.name: self[s.name].copy() for s in self.layout}

    def __repr__(self):
        return f"ParamVector(n={len(self)}, slices={self.names})"


@dataclass(frozen=True)
class MLPArch:
    """Layer widths from input to output, e.g. ``(4, 64, 64, 2)``."""

    sizes: tuple[int, ...]
    activation: str = "tanh"
    prefix: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def weight(self, k):
        return f"{self.prefix}l{k}.W"

    def bias(self, k):
        return f"{self.prefix}l{k}.b"


def _tanh_grad(z, h):
    return 1.0 - h * h


def _relu_grad(z, h):
    return (z > 0).astype(float)


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
}


def _mlp_forward_cached(params: ParamVector, x, arch: MLPArch):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != arch.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {arch.sizes[0]}")
    act, _ = _ACTIVATIONS[arch.activation]
    pre, post = [], [x]
    h = x
    for k in range(arch.n_layers):
        z = h @ params[arch.weight(k)] + params[arch.bias(k)]
        h = act(z) if k < arch.n_layers - 1 else z
        pre.append(z)
        post.append(h)
    return h, (pre, post)


def _mlp_backward(params: ParamVector, arch: MLPArch, cache, dout, grad: np.ndarray):
    """Accumulate parameter gradients into ``grad`` (a flat array aligned with params)."""
    pre, post = cache
    _, act_grad = _ACTIVATIONS[arch.activation]
    dz = dout
    for k in range(arch.n_layers - 1, -1, -1):
        sW = params._index[arch.weight(k)]
        sb = params._index[arch.bias(k)]
        grad[sW.start : sW.stop] += (post[k].T @ dz).ravel()
        grad[sb.start : sb.stop] += dz.sum(axis=0)
        if k == 0:
            break
        dh = dz @ params[arch.weight(k)].T
        dz = dh * act_grad(pre[k - 1], post[k])
    return grad


def mlp_forward(params: ParamVector, x, arch: MLPArch) -> np.ndarray:
    """Evaluate the MLP; hidden layers use ``arch.activation``, the head is linear."""
    return _mlp_forward_cached(params, x, arch)[0]


@dataclass(frozen=True)
class PolicySpec:
    """Shapes and initialisation of an actor/critic pair."""

    obs_dim: int
    action_dim: int
    discrete: bool = False
    pi_hidden: tuple[int, ...] = (64, 64)
    vf_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    log_std_init: float = -2.0
    ortho_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pi_hidden", tuple(self.pi_hidden))
        object.__setattr__(self, "vf_hidden", tuple(self.vf_hidden))

    @cached_property
    def pi_arch(self) -> MLPArch:
        return MLPArch((self.obs_dim, *self.pi_hidden, self.action_dim), self.activation, "pi.")

    @cached_property
    def vf_arch(self) -> MLPArch:
        return MLPArch((self.obs_dim, *self.vf_hidden, 1), self.activation, "vf.")

    def to_dict(self):
        d = asdict(self)
        d["pi_hidden"] = list(self.pi_hidden)
        d["vf_hidden"] = list(self.vf_hidden)
        return d


def ortho_init(rows, cols, gain, rng) -> np.ndarray:
    """Gain-scaled matrix with orthonormal rows or columns, whichever are fewer."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def _init_mlp(arch: MLPArch, rng, ortho: bool, head_gain: float, arrays: dict):
    for k in range(arch.n_layers):
        fan_in, fan_out = arch.sizes[k], arch.sizes[k + 1]
        if ortho:
            gain = head_gain if k == arch.n_layers - 1 else math.sqrt(2.0)
            W = ortho_init(fan_in, fan_out, gain, rng)
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        arrays[arch.weight(k)] = W
        arrays[arch.bias(k)] = b


def init_params(spec: PolicySpec, rng) -> ParamVector:
    arrays: dict[str, np.ndarray] = {}
    _init_mlp(spec.pi_arch, rng, spec.ortho_init, 0.01, arrays)
    if not spec.discrete:
        arrays["pi.log_std"] = np.full(spec.action_dim, float(spec.log_std_init))
    _init_mlp(spec.vf_arch, rng, spec.ortho_init, 1.0, arrays)
    return ParamVector.from_arrays(arrays)


@dataclass
class PolicyDist:
    """Batch of action distributions.

    ``params`` holds Gaussian means or categorical logits, shape ``(n, d)``.
    """

    kind: str
    params: np.ndarray
    log_std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        if self.kind == "gaussian":
            if self.log_std is None:
                raise ValueError("gaussian distribution needs log_std")
            self.log_std = np.asarray(self.log_std, dtype=float)
        if not np.all(np.isfinite(self.params)) or (
            self.log_std is not None and not np.all(np.isfinite(self.log_std))
        ):
            raise FloatingPointError("distribution parameters are not finite")

    @property
    def std(self):
        return np.exp(self.log_std)

    def probs(self):
        z = self.params - self.params.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def log_probs_all(self):
        z = self.params - self.params.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def sample(self, rng):
        if self.kind == "gaussian":
            return self.params + self.std * rng.standard_normal(self.params.shape)
        p = self.probs()
        u = rng.random(p.shape[0])
        idx = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
        return np.minimum(idx, p.shape[-1] - 1)

    def mode(self):
        if self.kind == "gaussian":
            return self.params.copy()
        return self.params.argmax(axis=-1)


def log_prob(dist: PolicyDist, actions) -> np.ndarray:
    if dist.kind == "gaussian":
        actions = np.asarray(actions, dtype=float).reshape(dist.params.shape)
        z = (actions - dist.params) / dist.std
        return (-0.5 * z * z - dist.log_std - 0.5 * LOG_2PI).sum(axis=-1)
    actions = np.asarray(actions, dtype=int).reshape(-1)
    if actions.shape[0] != dist.params.shape[0]:
        raise ValueError("one action index per distribution required")
    return dist.log_probs_all()[np.arange(actions.shape[0]), actions]


def entropy(dist: PolicyDist) -> np.ndarray:
    if dist.kind == "gaussian":
        per_dim = 0.5 * (LOG_2PI + 1.0) + dist.log_std
        return np.full(dist.params.shape[0], per_dim.sum())
    p = dist.probs()
    logp = dist.log_probs_all()
    return -(np.where(p > 0, p * logp, 0.0)).sum(axis=-1)


def policy_dist(params: ParamVector, spec: PolicySpec, obs) -> PolicyDist:
    out = mlp_forward(params, np.atleast_2d(obs), spec.pi_arch)
    if spec.discrete:
        return PolicyDist("categorical", out)
    return PolicyDist("gaussian", out, params["pi.log_std"])


def value_forward(params: ParamVector, spec: PolicySpec, obs) -> np.ndarray:
    return mlp_forward(params, np.atleast_2d(obs), spec.vf_arch)[:, 0]


@dataclass
class LossInfo:
    loss: float
    grad: ParamVector
    policy_loss: float
    value_loss: float
    entropy: float
    ratios: np.ndarray = field(repr=False)


def _actor_backward(params, spec, cache, dist, actions, g_logp, c_ent_scale, grad):
    """Backprop ``sum(g_logp * logp) - c_ent_scale * sum(entropy)`` into ``grad``."""
    n = dist.params.shape[0]
    if spec.discrete:
        p = dist.probs()
        onehot = np.zeros_like(p)
        onehot[np.arange(n), actions] = 1.0
        dout = g_logp[:, None] * (onehot - p)
        if c_ent_scale:
            logp_all = dist.log_probs_all()
            H = -(p * logp_all).sum(axis=-1)
            dout = dout + c_ent_scale * p * (logp_all + H[:, None])
    else:
        std = dist.std
        z = (actions - dist.params) / std
        dout = g_logp[:, None] * z / std
        s = params._index["pi.log_std"]
        grad[s.start : s.stop] += (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - c_ent_scale * n
    _mlp_backward(params, spec.pi_arch, cache, dout, grad)


def loss_and_grad(params: ParamVector, spec: PolicySpec, batch, cfg: SurrogateConfig,
                  c_vf: float, c_ent: float) -> LossInfo:
    """Composite PPO loss and its exact gradient.

    ``loss = -(mean(surrogate) - c_vf * mean((V - V_targ)^2) + c_ent * mean(H))``.

    ``batch`` needs ``obs``, ``actions``, ``logprob_old``, ``advantages`` and
    ``value_targets`` arrays; advantages are used exactly as given.
    """
    obs = np.asarray(batch.obs, dtype=float)
    n = obs.shape[0]
    if n == 0:
        raise ValueError("loss_and_grad called with an empty batch")
    actions = batch.actions
    adv = np.asarray(batch.advantages, dtype=float)

    logits, pi_cache = _mlp_forward_cached(params, obs, spec.pi_arch)
    if spec.discrete:
        dist = PolicyDist("categorical", logits)
        actions = np.asarray(actions, dtype=int).reshape(-1)
    else:
        dist = PolicyDist("gaussian", logits, params["pi.log_std"])
        actions = np.asarray(actions, dtype=float).reshape(logits.shape)
    logp = log_prob(dist, actions)
    ratios = np.exp(logp - batch.logprob_old)
    terms, slopes = surrogate_value_and_slope(cfg, ratios, adv)
    ent = entropy(dist)

    v, vf_cache = _mlp_forward_cached(params, obs, spec.vf_arch)
    verr = v[:, 0] - batch.value_targets

    per_sample = -terms + c_vf * verr * verr - c_ent * ent
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise FloatingPointError(f"non-finite loss at sample {bad}")

    policy_loss = -float(terms.mean())
    value_loss = float((verr * verr).mean())
    ent_mean = float(ent.mean())
    loss = policy_loss + c_vf * value_loss - c_ent * ent_mean

    grad = np.zeros(len(params))
    g_logp = -slopes * ratios / n
    _actor_backward(params, spec, pi_cache, dist, actions, g_logp, c_ent / n, grad)
    _mlp_backward(params, spec.vf_arch, vf_cache, (2.0 * c_vf / n) * verr[:, None], grad)
    return LossInfo(loss, ParamVector(grad, params.layout), policy_loss, value_loss, ent_mean, ratios)


def logprob_jacobian(params: ParamVector, spec: PolicySpec, obs, actions) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log-probabilities and their gradients, shape ``(n, len(params))``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n = obs.shape[0]
    out, cache = _mlp_forward_cached(params, obs, spec.pi_arch)
    if spec.discrete:
        dist = PolicyDist("categorical", out)
        actions = np.asarray(actions, dtype=int).reshape(-1)
    else:
        dist = PolicyDist("gaussian", out, params["pi.log_std"])
        actions = np.asarray(actions, dtype=float).reshape(out.shape)
    logp = log_prob(dist, actions)
    jac = np.zeros((n, len(params)))
    for i in range(n):
        sub = ([z[i : i + 1] for z in cache[0]], [h[i : i + 1] for h in cache[1]])
        sub_dist = PolicyDist(dist.kind, dist.params[i : i + 1], dist.log_std)
        _actor_backward(params, spec, sub, sub_dist, actions[i : i + 1], np.ones(1), 0.0, jac[i])
    return logp, jac


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: ParamVector, grad, state: AdamState, lr: float):
    """One bias-corrected Adam descent step; returns new ``(params, state)``."""
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=float)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ValueError(f"shape mismatch: params {params.values.shape}, grad {g.shape}, state {state.m.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.eps_hat)
    return ParamVector(new_values, params.layout), new_state


def clip_grad_norm(grad, max_norm: float):
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=float)
    norm = float(np.sqrt(np.dot(g, g)))
    if norm > max_norm:
        g = g * (max_norm / norm)
    if isinstance(grad, ParamVector):
        return ParamVector(g, grad.layout)
    return g


def save_checkpoint(path, params: ParamVector, spec: PolicySpec | None = None,
                    extra: dict[str, Any] | None = None) -> Path:
    """Write parameters as JSON; Python float repr makes the round trip exact."""
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "spec": spec.to_dict() if spec is not None else None,
        "slices": [
            {"name": s.name, "shape": list(s.shape), "values": params[s.name].ravel().tolist()}
            for s in params.layout
        ],
        "extra": extra or {},
    }
    try:
        path.write_text(json.dumps(doc))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[ParamVector, PolicySpec | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    arrays = {
        s["name"]: np.asarray(s["values"], dtype=float).reshape(s["shape"]) for s in doc["slices"]
    }
    spec = PolicySpec(**doc["spec"]) if doc.get("spec") else None
    return ParamVector.from_arrays(arrays), spec, doc.get("extra", {})
