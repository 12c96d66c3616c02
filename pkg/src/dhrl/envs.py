"""Native continuous-control tasks integrated with fixed-step RK4.

Three desk-scale tasks: pendulum swing-up, cart-pole swing-up, and continuous
mountain-car. Dynamics are vectorized over batches of states so the same core
serves single-environment interaction, reward-range audits, and Monte Carlo
ground-truth rollouts.

Conventions:
  - The MDP state is the observation vector (angles appear as cos/sin pairs),
    so learned models and the true dynamics share one state space.
  - One agent step advances `action_repeat` physics steps of `dt` seconds and
    sums their rewards; each physics step is integrated with `n_substeps`
    internal RK4 stages for accuracy.
  - Actions are clipped to bounds before integration.
  - `terminated` marks true MDP termination (mountain-car goal); time-limit
    cutoffs set `truncated` only and never zero bootstrap targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import Transition


class EnvFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


@dataclass
class EvalStats:
    mean: float
    std: float
    returns: list

    @classmethod
    def from_returns(cls, returns):
        returns = [float(r) for r in returns]
        mean = float(np.mean(returns))
        std = float(np.std(returns, ddof=1)) if len(returns) > 1 else 0.0
        return cls(mean=mean, std=std, returns=returns)


class TaskDynamics:
    """Base class: RK4 integration loop plus per-task hooks."""

    id = ""
    state_dim = 0
    action_dim = 0

    def __init__(self, dt, n_substeps, episode_length, action_repeat):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if int(n_substeps) < 1:
            raise ValueError("n_substeps must be at least 1")
        if int(action_repeat) < 1:
            raise ValueError("action_repeat must be at least 1")
        if int(episode_length) % int(action_repeat) != 0:
            raise ValueError("episode_length must be divisible by action_repeat")
        self.dt = float(dt)
        self.n_substeps = int(n_substeps)
        self.episode_length = int(episode_length)
        self.action_repeat = int(action_repeat)

    # hooks operating on internal physics coordinates, shape (n, P)
    def _derivative(self, phys, actions):
        raise NotImplementedError

    def _reward(self, phys, actions):
        raise NotImplementedError

    def _constrain(self, phys):
        return phys

    def _terminal(self, phys):
        return np.zeros(phys.shape[0], dtype=bool)

    def _bonus(self, terminated):
        return np.zeros(terminated.shape[0])

    def to_internal(self, states):
        raise NotImplementedError

    def to_observed(self, phys):
        raise NotImplementedError

    def sample_initial(self, n, rng):
        raise NotImplementedError

    @property
    def agent_steps_per_episode(self):
        return self.episode_length // self.action_repeat

    def _rk4(self, phys, actions, h):
        k1 = self._derivative(phys, actions)
        k2 = self._derivative(phys + (0.5 * h) * k1, actions)
        k3 = self._derivative(phys + (0.5 * h) * k2, actions)
        k4 = self._derivative(phys + h * k3, actions)
        return phys + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_batch(self, states, actions):
        """Advance one agent step. Returns (next_states, rewards, terminated)."""
        states = np.asarray(states, dtype=float)
        actions = np.clip(np.asarray(actions, dtype=float), self.action_low, self.action_high)
        phys = self.to_internal(states)
        rewards = np.zeros(phys.shape[0])
        h = self.dt / self.n_substeps
        for _ in range(self.action_repeat):
            rewards += self._reward(phys, actions)
            for _ in range(self.n_substeps):
                phys = self._rk4(phys, actions, h)
            phys = self._constrain(phys)
        terminated = self._terminal(phys)
        rewards += self._bonus(terminated)
        return self.to_observed(phys), rewards, terminated


class PendulumSwingup(TaskDynamics):
    """Torque-limited rigid pendulum, upright at angle zero.

    State [cos a, sin a, da/dt], torque bounded by `max_torque`, angular speed
    clipped to `max_speed` after every physics step. Reward per physics step is
    -(a_wrapped^2 + 0.1 (da/dt)^2 + 0.001 u^2); episodes never terminate.
    """

    id = "pendulum-swingup"
    state_dim = 3
    action_dim = 1

    def __init__(
        self,
        dt=0.05,
        n_substeps=4,
        episode_length=1000,
        action_repeat=2,
        max_torque=2.0,
        max_speed=8.0,
        mass=1.0,
        length=1.0,
        gravity=10.0,
    ):
        super().__init__(dt, n_substeps, episode_length, action_repeat)
        self.max_torque = float(max_torque)
        self.max_speed = float(max_speed)
        self.mass = float(mass)
        self.length = float(length)
        self.gravity = float(gravity)
        self.action_low = np.array([-self.max_torque])
        self.action_high = np.array([self.max_torque])
        worst = np.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2
        self.reward_range = (-worst * self.action_repeat, 0.0)

    def _derivative(self, phys, actions):
        theta, speed = phys[:, 0], phys[:, 1]
        accel = (1.5 * self.gravity / self.length) * np.sin(theta)
        accel = accel + (3.0 / (self.mass * self.length**2)) * actions[:, 0]
        return np.stack([speed, accel], axis=1)

    def _reward(self, phys, actions):
        wrapped = np.mod(phys[:, 0] + np.pi, 2.0 * np.pi) - np.pi
        return -(wrapped**2 + 0.1 * phys[:, 1] ** 2 + 0.001 * actions[:, 0] ** 2)

    def _constrain(self, phys):
        phys[:, 1] = np.clip(phys[:, 1], -self.max_speed, self.max_speed)
        return phys

    def to_internal(self, states):
        theta = np.arctan2(states[:, 1], states[:, 0])
        speed = np.clip(states[:, 2], -self.max_speed, self.max_speed)
        return np.stack([theta, speed], axis=1)

    def to_observed(self, phys):
        return np.stack([np.cos(phys[:, 0]), np.sin(phys[:, 0]), phys[:, 1]], axis=1)

    def sample_initial(self, n, rng):
        theta = rng.uniform(-np.pi, np.pi, n)
        speed = rng.uniform(-1.0, 1.0, n)
        return self.to_observed(np.stack([theta, speed], axis=1))


class CartpoleSwingup(TaskDynamics):
    """Cart on a bounded rail with a free-swinging pole, started hanging down.

    State [x, dx/dt, cos a, sin a, da/dt] with the pole angle measured from
    upright. The rail is a hard wall at +-rail_limit (hitting it zeroes the
    cart velocity). Reward per physics step is the product of an uprightness
    bonus and a centering bonus, in [0, 1]; episodes never terminate.
    """

    id = "cartpole-swingup"
    state_dim = 5
    action_dim = 1

    def __init__(
        self,
        dt=0.02,
        n_substeps=2,
        episode_length=1000,
        action_repeat=2,
        force_mag=10.0,
        rail_limit=2.5,
        max_cart_speed=10.0,
        max_pole_speed=15.0,
        cart_mass=1.0,
        pole_mass=0.1,
        pole_half_length=0.5,
        gravity=9.8,
    ):
        super().__init__(dt, n_substeps, episode_length, action_repeat)
        self.force_mag = float(force_mag)
        self.rail_limit = float(rail_limit)
        self.max_cart_speed = float(max_cart_speed)
        self.max_pole_speed = float(max_pole_speed)
        self.cart_mass = float(cart_mass)
        self.pole_mass = float(pole_mass)
        self.pole_half_length = float(pole_half_length)
        self.gravity = float(gravity)
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self.reward_range = (0.0, 1.0 * self.action_repeat)

    def _derivative(self, phys, actions):
        x_dot, theta, theta_dot = phys[:, 1], phys[:, 2], phys[:, 3]
        force = self.force_mag * actions[:, 0]
        total_mass = self.cart_mass + self.pole_mass
        ml = self.pole_mass * self.pole_half_length
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        temp = (force + ml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.pole_half_length * (4.0 / 3.0 - self.pole_mass * cos_t**2 / total_mass)
        )
        x_acc = temp - ml * theta_acc * cos_t / total_mass
        return np.stack([x_dot, x_acc, theta_dot, theta_acc], axis=1)

    def _reward(self, phys, actions):
        upright = 0.5 * (1.0 + np.cos(phys[:, 2]))
        centered = 1.0 - (phys[:, 0] / self.rail_limit) ** 2
        return upright * centered

    def _constrain(self, phys):
        beyond = np.abs(phys[:, 0]) > self.rail_limit
        phys[:, 0] = np.clip(phys[:, 0], -self.rail_limit, self.rail_limit)
        phys[:, 1] = np.where(beyond, 0.0, np.clip(phys[:, 1], -self.max_cart_speed, self.max_cart_speed))
        phys[:, 3] = np.clip(phys[:, 3], -self.max_pole_speed, self.max_pole_speed)
        return phys

    def to_internal(self, states):
        x = np.clip(states[:, 0], -self.rail_limit, self.rail_limit)
        x_dot = np.clip(states[:, 1], -self.max_cart_speed, self.max_cart_speed)
        theta = np.arctan2(states[:, 3], states[:, 2])
        theta_dot = np.clip(states[:, 4], -self.max_pole_speed, self.max_pole_speed)
        return np.stack([x, x_dot, theta, theta_dot], axis=1)

    def to_observed(self, phys):
        return np.stack(
            [phys[:, 0], phys[:, 1], np.cos(phys[:, 2]), np.sin(phys[:, 2]), phys[:, 3]],
            axis=1,
        )

    def sample_initial(self, n, rng):
        x = rng.uniform(-0.1, 0.1, n)
        x_dot = rng.uniform(-0.05, 0.05, n)
        theta = np.pi + rng.uniform(-0.1, 0.1, n)
        theta_dot = rng.uniform(-0.05, 0.05, n)
        return self.to_observed(np.stack([x, x_dot, theta, theta_dot], axis=1))


class MountainCar(TaskDynamics):
    """Continuous mountain-car: weak engine, goal on the right hill.

    State [position, velocity]. Reaching `goal_position` terminates the
    episode with a +100 bonus; each physics step costs 0.1 u^2. The left wall
    is inelastic.
    """

    id = "mountain-car"
    state_dim = 2
    action_dim = 1

    def __init__(
        self,
        dt=1.0,
        n_substeps=1,
        episode_length=300,
        action_repeat=1,
        power=0.0015,
        slope_gravity=0.0025,
        min_position=-1.2,
        max_position=0.6,
        max_speed=0.07,
        goal_position=0.45,
        start_low=-0.6,
        start_high=-0.4,
    ):
        super().__init__(dt, n_substeps, episode_length, action_repeat)
        self.power = float(power)
        self.slope_gravity = float(slope_gravity)
        self.min_position = float(min_position)
        self.max_position = float(max_position)
        self.max_speed = float(max_speed)
        self.goal_position = float(goal_position)
        self.start_low = float(start_low)
        self.start_high = float(start_high)
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self.reward_range = (-0.1 * self.action_repeat, 100.0)

    def _derivative(self, phys, actions):
        accel = self.power * actions[:, 0] - self.slope_gravity * np.cos(3.0 * phys[:, 0])
        return np.stack([phys[:, 1], accel], axis=1)

    def _reward(self, phys, actions):
        return -0.1 * actions[:, 0] ** 2

    def _constrain(self, phys):
        phys[:, 1] = np.clip(phys[:, 1], -self.max_speed, self.max_speed)
        at_left = phys[:, 0] < self.min_position
        phys[:, 0] = np.clip(phys[:, 0], self.min_position, self.max_position)
        phys[:, 1] = np.where(at_left, np.maximum(phys[:, 1], 0.0), phys[:, 1])
        return phys

    def _terminal(self, phys):
        return phys[:, 0] >= self.goal_position

    def _bonus(self, terminated):
        return 100.0 * terminated

    def to_internal(self, states):
        pos = np.clip(states[:, 0], self.min_position, self.max_position)
        vel = np.clip(states[:, 1], -self.max_speed, self.max_speed)
        return np.stack([pos, vel], axis=1)

    def to_observed(self, phys):
        return phys.copy()

    def sample_initial(self, n, rng):
        pos = rng.uniform(self.start_low, self.start_high, n)
        return np.stack([pos, np.zeros(n)], axis=1)


TASKS = {
    PendulumSwingup.id: PendulumSwingup,
    CartpoleSwingup.id: CartpoleSwingup,
    MountainCar.id: MountainCar,
}


def make_task(task_id, **overrides):
    if task_id not in TASKS:
        raise KeyError(f"unknown task {task_id!r}; known: {sorted(TASKS)}")
    return TASKS[task_id](**overrides)


class Env:
    """Single-trajectory wrapper tracking step counters and episode cutoffs."""

    def __init__(self, task, seed):
        self.task = task
        self._rng = np.random.default_rng(seed)
        self.state = None
        self.physics_steps = 0
        self.agent_steps = 0

    def reset(self):
        self.state = self.task.sample_initial(1, self._rng)[0]
        self.physics_steps = 0
        self.agent_steps = 0
        return self.state.copy()

    def step(self, action):
        if self.state is None:
            raise RuntimeError("step called before reset")
        if not np.all(np.isfinite(self.state)):
            raise EnvFault("non-finite state before integration")
        next_states, rewards, term = self.task.step_batch(
            self.state[None, :], np.asarray(action, dtype=float)[None, :]
        )
        if not np.all(np.isfinite(next_states)):
            raise EnvFault("non-finite state after integration")
        self.physics_steps += self.task.action_repeat
        self.agent_steps += 1
        terminated = bool(term[0])
        truncated = (not terminated) and self.physics_steps >= self.task.episode_length
        self.state = next_states[0]
        return StepResult(next_states[0].copy(), float(rewards[0]), terminated, truncated)


def run_episode(task, policy, seed):
    """Roll one episode. `policy(state, rng) -> action`; returns (return, transitions)."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_seed, policy_seed = base.spawn(2)
    env = Env(task, env_seed)
    rng = np.random.default_rng(policy_seed)
    state = env.reset()
    total = 0.0
    transitions = []
    while True:
        action = np.asarray(policy(state, rng), dtype=float)
        result = env.step(action)
        transitions.append(
            Transition(
                state=state.copy(),
                action=action.copy(),
                reward=result.reward,
                next_state=result.next_state.copy(),
                terminated=result.terminated,
                truncated=result.truncated,
            )
        )
        total += result.reward
        state = result.next_state
        if result.terminated or result.truncated:
            break
    return total, transitions


def evaluate(task, policy, n_episodes=10, seed=0):
    """Test-return protocol: independent episodes, per-episode seeds, summary stats."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    returns = [run_episode(task, policy, child)[0] for child in base.spawn(n_episodes)]
    return EvalStats.from_returns(returns)
