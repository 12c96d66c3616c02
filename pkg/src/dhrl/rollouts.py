"""Model rollouts and the value-expansion estimators built on them.

Two rollout styles share one model sampler. Distribution rollouts are long,
gradient-free, and exist only to fill the model buffer with fresh on-policy
states. Training rollouts are short, run on the autodiff tape, and carry the
reparametrized actions and sampled transitions that the value and Q
estimators (and the policy gradient) are built from.
"""

from dataclasses import dataclass

import numpy as np

from .actor_critic import target_q
from .autodiff import tensor as T
from .autodiff.tensor import Tape, Tensor
from .world_model import ts1_predict


class ModelSampler:
    """Ensemble model plus normalization stats, stepping in raw state space.

    Every prediction picks one ensemble member per row (TS-1) and samples the
    full output vector from that member's Gaussian. The tape path takes the
    member indices and standard normals as arguments so the caller controls
    the randomness; the numpy path draws them from the generator directly.
    """

    def __init__(self, model, stats):
        self.model = model
        self.stats = stats
        self.members = model.members
        self.noise_dim = model.state_dim + 1

    def step(self, states, actions, member_idx, eps):
        """Differentiable transition; model parameters act as constants."""
        norm = T.mul(T.sub(states, self.stats.state_mean), 1.0 / self.stats.state_std)
        x = T.concat_last([norm, actions])
        mu = self.model.member_mean(x, member_idx)
        sigma = self.model.sigma_rows(member_idx)
        out = T.add(mu, T.mul(sigma, np.asarray(eps)))
        delta = T.slice_last(out, 0, self.model.state_dim)
        reward_col = T.slice_last(out, self.model.state_dim, self.model.state_dim + 1)
        reward_norm = T.reshape(reward_col, (states.data.shape[0],))
        next_states = T.add(
            states, T.add(self.stats.delta_mean, T.mul(self.stats.delta_std, delta))
        )
        rewards = T.add(self.stats.reward_mean, T.mul(self.stats.reward_std, reward_norm))
        return next_states, rewards

    def step_np(self, states, actions, rng):
        """Gradient-free transition returning (next states, rewards, finite mask)."""
        norm = self.stats.normalize_states(states)
        next_norm, rewards, ok = ts1_predict(self.model, norm, actions, self.stats, rng)
        return self.stats.denormalize_states(next_norm), rewards, ok


@dataclass
class DrReport:
    """Outcome of one distribution-rollout refresh."""

    batch: int
    horizon: int
    stored: int
    truncated_branches: int


@dataclass
class Trajectory:
    """A rolled-out path: T transitions plus a terminal action.

    Holds tape tensors when produced by training_rollout and plain arrays when
    produced by rollout_np. `valid` marks rows that stayed finite; masked rows
    are zeroed in place so downstream math never sees non-finite values.
    """

    states: list
    actions: list
    log_probs: list
    rewards: list
    valid: np.ndarray
    masked_rows: int
    horizon: int


@dataclass
class ValueGradientReport:
    """Policy-gradient diagnostics for one actor step."""

    objective: float
    grad_norm: float
    clipped: bool
    masked_rows: int
    gradient: np.ndarray
    log_probs0: np.ndarray


def distribution_rollout(sampler, policy, replay_buffer, model_buffer, batch, horizon, rng):
    """Roll `batch` branches `horizon` steps and append them to the model buffer.

    Start states are drawn uniformly from the replay buffer; actions come from
    the stochastic policy. Branches that produce a non-finite prediction are
    dropped from that step on while their earlier transitions stay stored.
    """
    if batch <= 0 or horizon <= 0:
        return DrReport(batch, horizon, 0, 0)
    states = replay_buffer.sample(batch, rng).states
    stored = 0
    truncated = 0
    for _ in range(horizon):
        actions, _ = policy.sample_np(states, rng)
        norm = sampler.stats.normalize_states(states)
        next_norm, rewards, ok = ts1_predict(sampler.model, norm, actions, sampler.stats, rng)
        if not ok.all():
            truncated += int(ok.size - np.count_nonzero(ok))
            states, actions = states[ok], actions[ok]
            next_norm, rewards = next_norm[ok], rewards[ok]
            if states.shape[0] == 0:
                break
        next_states = sampler.stats.denormalize_states(next_norm)
        model_buffer.push_batch(states, actions, rewards, next_states)
        stored += states.shape[0]
        states = next_states
    return DrReport(batch, horizon, stored, truncated)


def training_rollout(sampler, policy, start_states, horizon, rng):
    """Differentiable rollout: `horizon` model steps and horizon+1 actions.

    Rows that turn non-finite are zeroed via mask_rows and recorded in
    `masked_rows`; the caller is expected to exclude them from any loss.
    """
    start = np.asarray(start_states)
    n = start.shape[0]
    states = [Tensor(start)]
    actions, log_probs, rewards = [], [], []
    valid = np.ones(n, dtype=bool)
    masked = 0
    for _ in range(horizon):
        eps_a = rng.standard_normal((n, policy.action_dim))
        action, lp = policy.sample(states[-1], eps_a)
        member_idx = rng.integers(0, sampler.members, n)
        eps_m = rng.standard_normal((n, sampler.noise_dim))
        nxt, reward = sampler.step(states[-1], action, member_idx, eps_m)
        finite = np.all(np.isfinite(nxt.data), axis=1) & np.isfinite(reward.data)
        if not np.all(finite | ~valid):
            valid &= finite
            masked = int(n - np.count_nonzero(valid))
        if masked:
            nxt = T.mask_rows(nxt, valid)
            reward = T.mask_rows(reward, valid)
        actions.append(action)
        log_probs.append(lp)
        rewards.append(reward)
        states.append(nxt)
    eps_a = rng.standard_normal((n, policy.action_dim))
    action, lp = policy.sample(states[-1], eps_a)
    actions.append(action)
    log_probs.append(lp)
    return Trajectory(states, actions, log_probs, rewards, valid, masked, horizon)


def rollout_np(sampler, policy, start_states, horizon, rng, first_actions=None):
    """Gradient-free rollout for target computation.

    With `first_actions` the first step replays stored actions instead of
    sampling; its log-prob slot is zero and never enters the estimator.
    """
    start = np.asarray(start_states, dtype=float)
    n = start.shape[0]
    states = [start]
    actions, log_probs, rewards = [], [], []
    valid = np.ones(n, dtype=bool)
    current = start
    for t in range(horizon):
        if t == 0 and first_actions is not None:
            action = np.asarray(first_actions, dtype=float)
            lp = np.zeros(n)
        else:
            action, lp = policy.sample_np(current, rng)
        nxt, reward, ok = sampler.step_np(current, action, rng)
        valid &= ok
        nxt = np.where(valid[:, None], nxt, 0.0)
        reward = np.where(valid, reward, 0.0)
        actions.append(action)
        log_probs.append(lp)
        rewards.append(reward)
        states.append(nxt)
        current = nxt
    action, lp = policy.sample_np(current, rng)
    actions.append(action)
    log_probs.append(lp)
    masked = int(n - np.count_nonzero(valid))
    return Trajectory(states, actions, log_probs, rewards, valid, masked, horizon)


def mve_value(traj, critics, alpha, gamma):
    """Soft value expansion over a tape trajectory.

    Discounted model rewards plus entropy bonuses, closed with the mean of the
    online critics at the terminal state-action pair (no bound clipping).
    """
    q = critics.actor_forward(traj.states[-1], traj.actions[-1])
    value = T.sub(q, T.mul(alpha, traj.log_probs[-1]))
    for t in reversed(range(traj.horizon)):
        step = T.sub(traj.rewards[t], T.mul(alpha, traj.log_probs[t]))
        value = T.add(step, T.mul(gamma, value))
    return value


def mve_q(traj, critics, bounds, alpha, gamma, rng):
    """Critic regression target from a numpy trajectory; fully detached.

    The first reward is the model reward at the stored pair and carries no
    entropy bonus; the terminal value is the clipped random-pair minimum over
    the target critics. Returns (targets, valid-row mask).
    """
    if traj.horizon < 1:
        raise ValueError("critic value expansion needs at least one model step")
    boot = target_q(critics, bounds, traj.states[-1], traj.actions[-1], rng)
    value = boot - alpha * traj.log_probs[-1]
    for t in range(traj.horizon - 1, 0, -1):
        value = (traj.rewards[t] - alpha * traj.log_probs[t]) + gamma * value
    return traj.rewards[0] + gamma * value, traj.valid.copy()


def one_step_target(
    policy, critics, bounds, rewards, next_states, alpha, gamma, rng, terminated=None
):
    """Classic soft one-step bootstrap from stored transitions."""
    actions, log_probs = policy.sample_np(next_states, rng)
    boot = target_q(critics, bounds, next_states, actions, rng) - alpha * log_probs
    if terminated is not None:
        boot = np.where(np.asarray(terminated, dtype=bool), 0.0, boot)
    return np.asarray(rewards, dtype=float) + gamma * boot


def critic_targets(sampler, policy, critics, bounds, batch, horizon, alpha, gamma, rng):
    """Dispatch critic targets: value expansion when horizon > 0, else one-step.

    Refreshes the Q bounds before bootstrapping, from the rollout rewards when
    a rollout happens and from the batch rewards otherwise, so the clip range
    tracks the reward scale the targets are built from.
    """
    if horizon == 0:
        bounds.update(batch.rewards)
        targets = one_step_target(
            policy,
            critics,
            bounds,
            batch.rewards,
            batch.next_states,
            alpha,
            gamma,
            rng,
            terminated=batch.terminated,
        )
        return targets, np.ones(targets.shape[0], dtype=bool)
    traj = rollout_np(sampler, policy, batch.states, horizon, rng, first_actions=batch.actions)
    seen = np.concatenate([step[traj.valid] for step in traj.rewards])
    if seen.size:
        bounds.update(seen)
    return mve_q(traj, critics, bounds, alpha, gamma, rng)


def value_gradient(
    sampler, policy, critics, start_states, horizon, alpha, gamma, rng, ceiling=100.0
):
    """Gradient of the mean value expansion with respect to policy parameters.

    Backpropagates through every model step and the terminal critic term; at
    horizon 0 only the critic term remains. Gradients above `ceiling` in norm
    are rescaled and flagged. Leaves the (descent-direction) gradient in
    policy.params for the optimizer and returns the ascent gradient flat.
    """
    with Tape() as tape:
        traj = training_rollout(sampler, policy, start_states, horizon, rng)
        n_valid = int(np.count_nonzero(traj.valid))
        if n_valid == 0:
            raise RuntimeError("every rollout branch produced non-finite values")
        value = mve_value(traj, critics, alpha, gamma)
        if traj.masked_rows:
            value = T.mask_rows(value, traj.valid)
        objective = T.mul(T.sum_(value), 1.0 / n_valid)
        policy.params.zero_grad()
        tape.backward(T.neg(objective))
    grad_norm = policy.params.grad_norm()
    clipped = grad_norm > ceiling
    if clipped:
        policy.params.scale_grads(ceiling / grad_norm)
    gradient = -policy.params.flat_grad()
    return ValueGradientReport(
        float(objective.data),
        grad_norm,
        clipped,
        traj.masked_rows,
        gradient,
        traj.log_probs[0].data.copy(),
    )
