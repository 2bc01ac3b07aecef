"""Slow, independent reference implementations used only by the tests.

Nothing here imports from ``dclamp_ppo``; every routine is a plain scalar
loop written straight from the defining formulas.
"""
import math


def clip(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def ppo(w, A, eps):
    return min(w * A, clip(w, 1 - eps, 1 + eps) * A)


def f_leaky(w, eps, alpha):
    if w < 1 - eps:
        return alpha * w + (1 - alpha) * (1 - eps)
    if w > 1 + eps:
        return alpha * w + (1 - alpha) * (1 + eps)
    return w


def leaky(w, A, eps, alpha):
    return min(w * A, f_leaky(w, eps, alpha) * A)


def f_rb(w, eps, alpha):
    if w < 1 - eps:
        return -alpha * w + (1 + alpha) * (1 - eps)
    if w > 1 + eps:
        return -alpha * w + (1 + alpha) * (1 + eps)
    return w


def rb(w, A, eps, alpha):
    return min(w * A, f_rb(w, eps, alpha) * A)


def dclamp(w, A, eps, alpha, beta):
    base = ppo(w, A, eps)
    if A > 0 and w < 1 - beta:
        return min(base, (alpha * w - (alpha - 1) * (1 - beta)) * A)
    if A < 0 and w > 1 + beta:
        return min(base, (alpha * w - (alpha - 1) * (1 + beta)) * A)
    return base


def term(variant, w, A, eps, alpha, beta):
    if variant == "ppo":
        return ppo(w, A, eps)
    if variant == "leaky":
        return leaky(w, A, eps, alpha)
    if variant == "rb":
        return rb(w, A, eps, alpha)
    return dclamp(w, A, eps, alpha, beta)


def gae_double_sum(rewards, values, dones, gamma, lam):
    """A_t = sum_l (gamma*lam)^l delta_{t+l}, stopping after the step that ends the episode."""
    T = len(rewards)
    adv = []
    for t in range(T):
        total = 0.0
        for l in range(T - t):
            k = t + l
            boot = 0.0 if dones[k] else values[k + 1]
            delta = rewards[k] + gamma * boot - values[k]
            total += (gamma * lam) ** l * delta
            if dones[k]:
                break
        adv.append(total)
    return adv


def adam_scalar(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def mlp_forward(layers, x, act="tanh"):
    """``layers`` is a list of (W, b) with W[i][j] mapping input i to output j."""
    h = list(x)
    for k, (W, b) in enumerate(layers):
        z = [b[j] + sum(h[i] * W[i][j] for i in range(len(h))) for j in range(len(b))]
        if k < len(layers) - 1:
            z = [math.tanh(v) if act == "tanh" else max(v, 0.0) for v in z]
        h = z
    return h


def count_directions(ratios, advs, beta):
    c = dict(n_pos=0, n_neg=0, wrong_pos=0, wrong_neg=0, strict_pos=0, strict_neg=0)
    for w, A in zip(ratios, advs):
        if A > 0:
            c["n_pos"] += 1
            if w < 1:
                c["wrong_pos"] += 1
                if w < 1 - beta:
                    c["strict_pos"] += 1
        elif A < 0:
            c["n_neg"] += 1
            if w > 1:
                c["wrong_neg"] += 1
                if w > 1 + beta:
                    c["strict_neg"] += 1
    return c


def chain_random_value(n_states, horizon, slip, p_right=0.5):
    """Expected return of a stationary policy on the chain by forward state-distribution propagation."""
    dist = [0.0] * n_states
    dist[0] = 1.0
    p_up = p_right * (1 - slip) + (1 - p_right) * slip
    total = 0.0
    for _ in range(horizon):
        total += dist[-1]
        nxt = [0.0] * n_states
        for s, p in enumerate(dist):
            nxt[min(s + 1, n_states - 1)] += p * p_up
            nxt[max(s - 1, 0)] += p * (1 - p_up)
        dist = nxt
    return total
