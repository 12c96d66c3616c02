"""Squashed-Gaussian actor, critic ensemble with EMA targets, learned entropy
temperature, and percentile-based target-value bounds.

The actor is a plain MLP (no normalization or dropout) producing a pre-squash
mean and log-std per action dimension; actions are tanh-squashed and affinely
mapped to the task bounds, and log-probs carry the full change-of-variables
correction including the bound scaling. The critics are a five-member fused
ensemble regularized with LayerNorm and light dropout; their EMA target copies
supply RED-Q bootstrap values (min over a random pair), clipped to running
reward-percentile Q bounds. Clipping never touches the actor-path critic.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import EnsembleLinear, LayerNorm, Linear, ParameterSet, layer_norm_np, silu_np
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape, Tensor

LOG_STD_BOUNDS = (-5.0, 2.0)
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


class Policy:
    """Actor mapping (normalized) states to a squashed Gaussian over actions."""

    def __init__(self, state_dim, action_dim, action_low, action_high, hidden=512, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        low = np.asarray(action_low, dtype=float)
        high = np.asarray(action_high, dtype=float)
        self.center = (high + low) / 2.0
        self.scale = (high - low) / 2.0
        self.l1 = Linear(state_dim, hidden, rng, name="l1")
        self.l2 = Linear(hidden, hidden, rng, name="l2")
        self.l3 = Linear(hidden, hidden, rng, name="l3")
        self.head = Linear(hidden, 2 * action_dim, rng, name="head")
        self.params = ParameterSet()
        for layer in (self.l1, self.l2, self.l3, self.head):
            layer.register(self.params)

    # -- numpy paths (collection, rollouts without gradients) -----------------

    def heads_np(self, states):
        h = silu_np(self.l1.forward_np(states))
        h = silu_np(self.l2.forward_np(h))
        h = silu_np(self.l3.forward_np(h))
        out = self.head.forward_np(h)
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], LOG_STD_BOUNDS[0], LOG_STD_BOUNDS[1])
        return mean, log_std

    def sample_with_eps_np(self, states, eps):
        mean, log_std = self.heads_np(states)
        std = np.exp(log_std)
        u = mean + std * eps
        tanh_u = np.tanh(u)
        action = self.center + self.scale * tanh_u
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), numerically stable
        neg2u = -2.0 * u
        softplus = np.maximum(neg2u, 0.0) + np.log1p(np.exp(-np.abs(neg2u)))
        squash = 2.0 * (_LOG_2 - u - softplus)
        per_dim = -0.5 * eps**2 - log_std - 0.5 * _LOG_2PI - np.log(self.scale) - squash
        return action, per_dim.sum(axis=1)

    def sample_np(self, states, rng):
        eps = rng.standard_normal((states.shape[0], self.action_dim))
        return self.sample_with_eps_np(states, eps)

    def mean_np(self, states):
        mean, _ = self.heads_np(states)
        return self.center + self.scale * np.tanh(mean)

    # -- tape path (differentiable rollouts and actor updates) ----------------

    def sample(self, states, eps):
        """Reparametrized sample on the tape. `states` Tensor, `eps` array."""
        h = T.silu(self.l1(states))
        h = T.silu(self.l2(h))
        h = T.silu(self.l3(h))
        out = self.head(h)
        mean = T.slice_last(out, 0, self.action_dim)
        log_std = T.clip(
            T.slice_last(out, self.action_dim, 2 * self.action_dim),
            LOG_STD_BOUNDS[0],
            LOG_STD_BOUNDS[1],
        )
        eps_c = Tensor(np.asarray(eps, dtype=mean.data.dtype))
        u = T.add(mean, T.mul(T.exp(log_std), eps_c))
        action = T.add(Tensor(self.center), T.mul(Tensor(self.scale), T.tanh(u)))
        softplus = T.softplus(T.mul(Tensor(np.asarray(-2.0)), u))
        squash = T.mul(Tensor(np.asarray(2.0)), T.sub(Tensor(np.asarray(_LOG_2)), T.add(u, softplus)))
        const = Tensor(-0.5 * np.asarray(eps) ** 2 - 0.5 * _LOG_2PI - np.log(self.scale))
        per_dim = T.sub(T.sub(const, log_std), squash)
        return action, T.sum_(per_dim, axis=1)


class CriticEnsemble:
    """K fused Q-networks plus an EMA target copy of every parameter."""

    def __init__(self, state_dim, action_dim, members=5, hidden=512, rng=None, dropout=1e-4):
        rng = rng if rng is not None else np.random.default_rng()
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.members = int(members)
        self.dropout = float(dropout)
        in_dim = state_dim + action_dim
        self.l1 = EnsembleLinear(members, in_dim, hidden, rng, name="q1")
        self.n1 = LayerNorm(hidden, name="qn1")
        self.l2 = EnsembleLinear(members, hidden, hidden, rng, name="q2")
        self.n2 = LayerNorm(hidden, name="qn2")
        self.l3 = EnsembleLinear(members, hidden, hidden, rng, name="q3")
        self.n3 = LayerNorm(hidden, name="qn3")
        self.head = EnsembleLinear(members, hidden, 1, rng, name="head")
        self.params = ParameterSet()
        for layer in (self.l1, self.n1, self.l2, self.n2, self.l3, self.n3, self.head):
            layer.register(self.params)
        self.target = self.params.to_arrays()

    def sync_target(self):
        self.target = self.params.to_arrays()

    def _stack(self, h, rng=None):
        """Shared tape trunk; dropout only when an RNG is supplied."""
        training = rng is not None
        for lin, ln in ((self.l1, self.n1), (self.l2, self.n2), (self.l3, self.n3)):
            h = lin(h)
            if training:
                h = T.dropout(h, self.dropout, rng, training=True)
            h = ln(T.silu(h))
        return self.head(h)

    def train_forward(self, states, actions, rng):
        """Tape forward of all members on fixed inputs -> Tensor (K, n)."""
        x = np.concatenate([states, actions], axis=1)
        xm = Tensor(np.ascontiguousarray(np.broadcast_to(x, (self.members,) + x.shape)))
        out = self._stack(xm, rng)
        return T.reshape(out, (self.members, x.shape[0]))

    def actor_forward(self, states, actions):
        """Differentiable mean critic value at (states, actions) tensors."""
        x = T.expand_members(T.concat_last([states, actions]), self.members)
        out = self._stack(x, None)
        return T.reshape(T.mean_(out, axis=0), (actions.data.shape[0],))

    def forward_np(self, states, actions):
        x = np.concatenate([states, actions], axis=1)
        h = self.l1.forward_np(x)
        h = self.n1.forward_np(silu_np(h))
        h = self.l2.forward_np(h)
        h = self.n2.forward_np(silu_np(h))
        h = self.l3.forward_np(h)
        h = self.n3.forward_np(silu_np(h))
        return self.head.forward_np(h)[..., 0]

    def target_np(self, states, actions):
        t = self.target
        x = np.concatenate([states, actions], axis=1)
        h = np.matmul(x, t["q1/w"]) + t["q1/b"][:, None, :]
        h = layer_norm_np(silu_np(h), t["qn1/gain"], t["qn1/bias"])
        h = np.matmul(h, t["q2/w"]) + t["q2/b"][:, None, :]
        h = layer_norm_np(silu_np(h), t["qn2/gain"], t["qn2/bias"])
        h = np.matmul(h, t["q3/w"]) + t["q3/b"][:, None, :]
        h = layer_norm_np(silu_np(h), t["qn3/gain"], t["qn3/bias"])
        return (np.matmul(h, t["head/w"]) + t["head/b"][:, None, :])[..., 0]

    def redq_target_np(self, states, actions, rng, subset=2):
        """Min over a uniformly drawn pair of target members (one draw per call)."""
        idx = rng.choice(self.members, size=min(subset, self.members), replace=False)
        return self.target_np(states, actions)[idx].min(axis=0)

    def ema_update(self, c):
        for name, tensor, _ in self.params.items():
            tgt = self.target[name]
            tgt *= c
            tgt += (1.0 - c) * tensor.data


class EntropyTemp:
    """Dual-gradient entropy temperature, parametrized by log alpha."""

    def __init__(self, action_dim, init=0.1, lr=3e-4, target_entropy=None):
        self.target_entropy = float(target_entropy) if target_entropy is not None else -float(action_dim)
        self.log_alpha = Tensor(np.array(math.log(init)), requires_grad=True)
        self._params = ParameterSet()
        self._params.add("log_alpha", self.log_alpha)
        self._opt = AdamW(self._params, lr=lr)

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha.data))

    def update(self, log_probs):
        """One dual step on loss -alpha * (mean log prob + target entropy)."""
        coeff = float(np.mean(log_probs) + self.target_entropy)
        self._params.zero_grad()
        with Tape() as tape:
            loss = T.mul(T.neg(T.exp(self.log_alpha)), Tensor(np.asarray(coeff)))
        tape.backward(loss)
        self._opt.step()
        return self.alpha

    def state_arrays(self):
        out = {"log_alpha": self.log_alpha.data.reshape(1).copy()}
        out.update({f"opt/{k}": v for k, v in self._opt.state_arrays().items()})
        return out

    def load_state_arrays(self, arrays, prefix=""):
        self.log_alpha.data = np.asarray(arrays[prefix + "log_alpha"]).reshape(()).copy()
        self._opt.load_state_arrays({k[len(prefix + "opt/"):]: v for k, v in arrays.items() if k.startswith(prefix + "opt/")})


class QBounds:
    """Running clip range for target-critic outputs.

    Fresh estimates are the 1st/99th reward percentiles scaled by 1/(1-gamma).
    The first update sets the bounds directly; later updates blend with
    new = eta * old + (1 - eta) * fresh.
    """

    def __init__(self, gamma, eta=0.95):
        self.gamma = float(gamma)
        self.eta = float(eta)
        self.q_low = None
        self.q_high = None
        self._warned = False

    @property
    def initialized(self):
        return self.q_low is not None

    def update(self, rewards):
        rewards = np.asarray(rewards)
        if rewards.size == 0:
            return
        r_low, r_high = np.percentile(rewards, [1.0, 99.0])
        fresh_low = float(r_low / (1.0 - self.gamma))
        fresh_high = float(r_high / (1.0 - self.gamma))
        if not self.initialized:
            self.q_low, self.q_high = fresh_low, fresh_high
        else:
            self.q_low = self.eta * self.q_low + (1.0 - self.eta) * fresh_low
            self.q_high = self.eta * self.q_high + (1.0 - self.eta) * fresh_high

    def clip(self, values):
        if not self.initialized:
            if not self._warned:
                warnings.warn("Q bounds not initialized yet; target values pass through unclipped")
                self._warned = True
            return values
        return np.clip(values, self.q_low, self.q_high)

    def state_array(self):
        if not self.initialized:
            return np.array([0.0, 0.0, 0.0])
        return np.array([1.0, self.q_low, self.q_high])

    def load_state_array(self, arr):
        if arr[0] > 0.5:
            self.q_low, self.q_high = float(arr[1]), float(arr[2])
        else:
            self.q_low = self.q_high = None


def target_q(critics, bounds, states, actions, rng):
    """RED-Q bootstrap value: min over a sampled target pair, then clipped."""
    return bounds.clip(critics.redq_target_np(states, actions, rng))


def soft_value_np(policy, critics, alpha, states, rng):
    """Single-sample estimate of V(s) = E[mean-critic Q - alpha log pi]."""
    actions, log_probs = policy.sample_np(states, rng)
    q = critics.forward_np(states, actions).mean(axis=0)
    return q - alpha * log_probs
