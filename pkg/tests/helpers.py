"""Shared test oracles: finite differences and small numeric utilities."""

import numpy as np

from dhrl.autodiff import nn
from dhrl.autodiff import tensor as T
from dhrl.autodiff.tensor import Tensor


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gf[i] = (up - down) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def discounted_sum(values, gamma):
    """Plain-python discounted sum oracle: sum_t gamma^t values[t]."""
    total = 0.0
    for t, v in enumerate(values):
        total += gamma**t * v
    return total


def flat_params(params):
    return np.concatenate([t.data.ravel() for t in params.tensors()])


def set_flat_params(params, vec):
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for t in params.tensors():
        size = t.data.size
        t.data[...] = vec[offset : offset + size].reshape(t.data.shape)
        offset += size
    if offset != vec.size:
        raise ValueError("flat vector length does not match parameter count")


_LOG_2 = float(np.log(2.0))
_LOG_2PI = float(np.log(2.0 * np.pi))


class SquashedLinearPolicy:
    """Four-parameter tanh-squashed Gaussian head over a linear mean.

    Same sampling and log-prob formulas as the full policy network, but small
    enough that dense finite differences over every parameter stay cheap.
    """

    def __init__(self, state_dim, action_low, action_high, seed=0):
        rng = np.random.default_rng(seed)
        low = np.asarray(action_low, dtype=np.float64)
        high = np.asarray(action_high, dtype=np.float64)
        self.action_dim = low.size
        self.center = (high + low) / 2.0
        self.scale = (high - low) / 2.0
        self.w = Tensor(0.3 * rng.standard_normal((state_dim, self.action_dim)), requires_grad=True)
        self.b = Tensor(0.1 * rng.standard_normal(self.action_dim), requires_grad=True)
        self.log_std = Tensor(np.full(self.action_dim, -0.5), requires_grad=True)
        self.params = nn.ParameterSet()
        self.params.add("w", self.w)
        self.params.add("b", self.b)
        self.params.add("log_std", self.log_std)

    def sample(self, states, eps):
        mean = T.add(T.matmul(states, self.w), self.b)
        log_std = T.clip(self.log_std, -5.0, 2.0)
        eps_c = Tensor(np.asarray(eps))
        u = T.add(mean, T.mul(T.exp(log_std), eps_c))
        action = T.add(Tensor(self.center), T.mul(Tensor(self.scale), T.tanh(u)))
        softplus = T.softplus(T.mul(Tensor(np.asarray(-2.0)), u))
        squash = T.mul(
            Tensor(np.asarray(2.0)), T.sub(Tensor(np.asarray(_LOG_2)), T.add(u, softplus))
        )
        const = Tensor(-0.5 * np.asarray(eps) ** 2 - 0.5 * _LOG_2PI - np.log(self.scale))
        per_dim = T.sub(T.sub(const, log_std), squash)
        return action, T.sum_(per_dim, axis=1)


class LinearGaussianPolicy:
    """Unsquashed policy u = K s + m + sig_pi * eps with fixed noise scale."""

    action_dim = 1

    def __init__(self, gain, bias, sig_pi):
        self.K = Tensor(np.asarray([[gain]]), requires_grad=True)
        self.m = Tensor(np.asarray([bias]), requires_grad=True)
        self.sig_pi = float(sig_pi)
        self.params = nn.ParameterSet()
        self.params.add("K", self.K)
        self.params.add("m", self.m)

    def sample(self, states, eps):
        eps = np.asarray(eps)
        u = T.add(T.matmul(states, self.K), self.m)
        action = T.add(u, Tensor(self.sig_pi * eps))
        lp = np.sum(-0.5 * eps**2 - np.log(self.sig_pi) - 0.5 * _LOG_2PI, axis=1)
        return action, Tensor(lp)


class LinearQuadraticSampler:
    """Scalar dynamics s' = A s + B u + sig_w eps, reward -(q s^2 + c u^2)."""

    members = 1
    noise_dim = 1

    def __init__(self, a_coef, b_coef, sig_w, q_cost, c_cost):
        self.a_coef = float(a_coef)
        self.b_coef = float(b_coef)
        self.sig_w = float(sig_w)
        self.q_cost = float(q_cost)
        self.c_cost = float(c_cost)

    def step(self, states, actions, member_idx, eps):
        nxt = T.add(
            T.add(T.mul(states, self.a_coef), T.mul(actions, self.b_coef)),
            Tensor(self.sig_w * np.asarray(eps)),
        )
        cost = T.add(
            T.mul(T.square(states), self.q_cost), T.mul(T.square(actions), self.c_cost)
        )
        reward = T.reshape(T.neg(cost), (states.data.shape[0],))
        return nxt, reward


class QuadraticCritic:
    """Closed-form terminal value p1 s^2 + p2 u^2 + p3 s u."""

    def __init__(self, p1, p2, p3):
        self.p1, self.p2, self.p3 = float(p1), float(p2), float(p3)

    def actor_forward(self, states, actions):
        val = T.add(
            T.add(T.mul(T.square(states), self.p1), T.mul(T.square(actions), self.p2)),
            T.mul(T.mul(states, actions), self.p3),
        )
        return T.reshape(val, (states.data.shape[0],))


def lq_exact_value(gain, bias, s0, horizon, gamma, sampler, sig_pi, critic):
    """Exact E[mve value] for the linear-quadratic setup via moment recursion.

    Tracks the mean and second moment of the scalar state under
    s' = A s + B(K s + m + sig_pi eps) + sig_w w, with quadratic running cost
    and a quadratic terminal critic, so the expectation is available in
    closed form for any horizon.
    """
    a_coef, b_coef = sampler.a_coef, sampler.b_coef
    mu, m2 = float(s0), float(s0) ** 2
    total = 0.0
    for t in range(horizon):
        eu2 = gain**2 * m2 + 2.0 * gain * bias * mu + bias**2 + sig_pi**2
        total += gamma**t * -(sampler.q_cost * m2 + sampler.c_cost * eu2)
        closed = a_coef + b_coef * gain
        mu_next = closed * mu + b_coef * bias
        m2_next = (
            closed**2 * m2
            + 2.0 * closed * mu * b_coef * bias
            + (b_coef * bias) ** 2
            + (b_coef * sig_pi) ** 2
            + sampler.sig_w**2
        )
        mu, m2 = mu_next, m2_next
    eu2 = gain**2 * m2 + 2.0 * gain * bias * mu + bias**2 + sig_pi**2
    esu = gain * m2 + bias * mu
    total += gamma**horizon * (critic.p1 * m2 + critic.p2 * eu2 + critic.p3 * esu)
    return total
