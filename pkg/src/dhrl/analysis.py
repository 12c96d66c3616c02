"""Measurement procedures that sit on top of training runs.

Four independent tools live here: a gradient bias/variance panel over rollout
horizons, a relative critic-error experiment that retrains critics from a
frozen checkpoint with and without distribution rollouts, running-range batch
histograms collected during training, and cross-run curve aggregation with
trimmed means.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import trim_mean

from .actor_critic import CriticEnsemble, QBounds
from .algo import Trainer, critic_step
from .autodiff.optim import AdamW
from .buffers import ModelBuffer
from .rollouts import distribution_rollout, mve_q, rollout_np, value_gradient


# -- gradient bias and spread over horizons ---------------------------------------


@dataclass
class BiasSemRecord:
    """Bias and standard error of the per-state value gradient at one horizon."""

    horizon: int
    bias: float
    sem: float
    states: int
    rollouts: int
    t_star: int


def bias_sem_curves(grads, t_star, rollouts=0):
    """Reduce per-state gradient estimates into bias and SEM curves.

    `grads` maps horizon -> (states, dim) array of rollout-averaged gradients.
    The entry at `t_star` serves as the reference: bias at horizon t is the
    mean squared distance of its per-state gradients from the reference mean,
    and SEM is the standard error of the per-state gradients around their own
    mean. Returns records sorted by horizon.
    """
    if t_star not in grads:
        raise ValueError("reference horizon missing from gradient table")
    sizes = {np.asarray(g).shape[0] for g in grads.values()}
    if len(sizes) != 1:
        raise ValueError("every horizon needs the same number of states")
    n_states = sizes.pop()
    if n_states < 2:
        raise ValueError("bias and SEM need at least two states")
    reference = np.asarray(grads[t_star], dtype=float).mean(axis=0)
    records = []
    for horizon in sorted(grads):
        g = np.asarray(grads[horizon], dtype=float)
        bias = float(np.mean(np.sum((g - reference) ** 2, axis=1)))
        centered = g - g.mean(axis=0)
        sem = float(
            np.sqrt(np.sum(centered**2) / (n_states * (n_states - 1)))
        )
        records.append(
            BiasSemRecord(int(horizon), bias, sem, n_states, int(rollouts), int(t_star))
        )
    return records


def gradient_panel(
    sampler, policy, critics, states, horizons, rollouts, alpha, gamma, seed=0, t_star=None
):
    """Estimate the value gradient at each (horizon, state) pair.

    Each estimate averages `rollouts` independent branches from one start
    state, which equals a single batched rollout over that many copied rows.
    Gradients are normalized by the policy parameter count so scales stay
    comparable across policies. Returns {horizon: (states, dim) array}.
    """
    if rollouts < 2:
        raise ValueError("gradient averaging needs at least two rollouts per state")
    states = np.asarray(states, dtype=float)
    if t_star is None:
        t_star = max(horizons)
    all_ts = sorted(set(int(t) for t in horizons) | {int(t_star)})
    n_params = sum(t.data.size for t in policy.params.tensors())
    panel = {}
    for t in all_ts:
        rows = np.empty((states.shape[0], n_params))
        for b in range(states.shape[0]):
            rng = np.random.default_rng(np.random.SeedSequence([seed, t, b]))
            rep = np.repeat(states[b : b + 1], rollouts, axis=0)
            report = value_gradient(
                sampler, policy, critics, rep, t, alpha, gamma, rng, ceiling=np.inf
            )
            rows[b] = report.gradient / n_params
        panel[t] = rows
    return panel


def grad_bias_sem(
    sampler, policy, critics, states, horizons, rollouts, alpha, gamma, t_star=None, seed=0
):
    """Gradient panel plus bias/SEM reduction; records only the asked horizons."""
    if t_star is None:
        t_star = max(horizons)
    panel = gradient_panel(
        sampler, policy, critics, states, horizons, rollouts, alpha, gamma, seed, t_star
    )
    wanted = sorted(set(int(t) for t in horizons))
    records = bias_sem_curves(panel, int(t_star), rollouts=rollouts)
    return [r for r in records if r.horizon in wanted]


# -- relative critic error from a frozen checkpoint --------------------------------


@dataclass
class RmedseRecord:
    """Root median squared relative critic error at one retraining iteration."""

    seed: int
    iteration: int
    value: float
    excluded: int
    probes: int
    rollouts: int
    with_dr: bool


def rmedse_value(ground, estimates, floor=1e-8, valid=None):
    """Root median squared relative error between estimates and ground truth.

    Probes whose ground truth is within `floor` of zero are excluded, as are
    rows flagged invalid. Returns (value, excluded count); value is nan when
    nothing survives.
    """
    ground = np.asarray(ground, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    used = np.abs(ground) >= floor
    if valid is not None:
        used &= np.asarray(valid, dtype=bool)
    excluded = int(ground.size - np.count_nonzero(used))
    if not np.any(used):
        return float("nan"), excluded
    ratio = (ground[used] - estimates[used]) / ground[used]
    return float(np.sqrt(np.median(ratio**2))), excluded


def mc_ground_truth(task, policy, states, actions, gamma, rollouts, horizon, rng):
    """Monte-Carlo Q estimates in the real dynamics, averaged over rollouts.

    The first step replays the probe actions; later steps sample the policy.
    Rewards stop accumulating once a branch terminates. Returns one value per
    probe row.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    n = states.shape[0]
    current = np.repeat(states, rollouts, axis=0)
    action = np.repeat(actions, rollouts, axis=0)
    alive = np.ones(n * rollouts, dtype=bool)
    returns = np.zeros(n * rollouts)
    disc = 1.0
    for t in range(horizon):
        if t > 0:
            action = policy.sample_np(current, rng)[0]
        current, rewards, terminated = task.step_batch(current, action)
        returns += disc * np.where(alive, rewards, 0.0)
        alive &= ~np.asarray(terminated, dtype=bool)
        disc *= gamma
        if not np.any(alive):
            break
    return returns.reshape(n, rollouts).mean(axis=1)


def rmedse_experiment(
    run_dir,
    with_dr,
    seeds,
    probes=256,
    mc_rollouts=256,
    iterations=2000,
    record_every=None,
    mc_horizon=1000,
    seed=0,
):
    """Retrain fresh critics against a frozen run and track their relative error.

    Loads the checkpoint in `run_dir` and freezes its policy, model, replay
    buffer, and temperature. For each entry in `seeds` a reinitialized critic
    ensemble trains for `iterations` steps, drawing batches from refreshed
    model-buffer rollouts when `with_dr` is true and from the replay buffer
    otherwise. Ground truth comes from Monte-Carlo rollouts in the real
    dynamics at a fixed probe batch; the recorded error is the root median
    squared relative deviation of the value-expansion estimate at the probes.
    """
    trainer = Trainer.resume(run_dir)
    cfg = trainer.config
    if cfg.tr_horizon < 1:
        raise ValueError("critic-error probes need a training-rollout horizon")
    if with_dr and cfg.dr_horizon < 1:
        raise ValueError("the distribution-rollout arm needs dr_horizon > 0")
    if record_every is None:
        record_every = max(1, iterations // 8)
    record_points = set(range(record_every, iterations + 1, record_every))
    record_points.add(iterations)

    s_dim, a_dim = trainer.task.state_dim, trainer.task.action_dim
    probe_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    probe = trainer.replay.sample(probes, probe_rng)
    ground = mc_ground_truth(
        trainer.task,
        trainer.policy,
        probe.states,
        probe.actions,
        cfg.gamma,
        mc_rollouts,
        mc_horizon,
        probe_rng,
    )
    alpha = trainer.temp.alpha

    records = []
    for s_i in seeds:
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, s_i]))
        critics = CriticEnsemble(
            s_dim, a_dim, members=cfg.critic_members, hidden=cfg.critic_hidden, rng=init_rng
        )
        optimizer = AdamW(critics.params, lr=cfg.critic_lr)
        bounds = QBounds(cfg.gamma, eta=cfg.bounds_momentum)
        bounds.load_state_array(trainer.bounds.state_array())
        train_rng = np.random.default_rng(np.random.SeedSequence([seed, 3, s_i]))
        model_buffer = (
            ModelBuffer(cfg.dr_batch * cfg.dr_horizon, s_dim, a_dim) if with_dr else None
        )
        for i in range(iterations):
            if model_buffer is not None and i % cfg.updates_per_dr == 0:
                model_buffer.clear()
                distribution_rollout(
                    trainer.sampler,
                    trainer.policy,
                    trainer.replay,
                    model_buffer,
                    cfg.dr_batch,
                    cfg.dr_horizon,
                    train_rng,
                )
            source = model_buffer if model_buffer is not None and len(model_buffer) else trainer.replay
            batch = source.sample(cfg.batch_size, train_rng)
            critic_step(
                critics,
                optimizer,
                trainer.sampler,
                trainer.policy,
                bounds,
                batch,
                cfg.tr_horizon,
                alpha,
                cfg.gamma,
                train_rng,
                ema=cfg.target_momentum,
            )
            it = i + 1
            if it in record_points:
                eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 4, s_i, it]))
                traj = rollout_np(
                    trainer.sampler,
                    trainer.policy,
                    probe.states,
                    cfg.tr_horizon,
                    eval_rng,
                    first_actions=probe.actions,
                )
                estimates, est_valid = mve_q(traj, critics, bounds, alpha, cfg.gamma, eval_rng)
                value, excluded = rmedse_value(ground, estimates, valid=est_valid)
                records.append(
                    RmedseRecord(
                        int(s_i), it, value, excluded, int(probes), int(mc_rollouts), bool(with_dr)
                    )
                )
    return records


# -- batch histograms during training ----------------------------------------------


def histogram_counts(values, lo, hi, bins=64):
    """Uniform-bin counts over [lo, hi] with one underflow and one overflow bin.

    A collapsed range widens to unit length so every value still lands in a
    bin. Returns (edges, counts) with len(counts) == bins + 2; counts sum to
    the number of values.
    """
    values = np.asarray(values, dtype=float).ravel()
    lo, hi = float(lo), float(hi)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    under = int(np.count_nonzero(values < lo))
    over = int(np.count_nonzero(values > hi))
    inner = np.histogram(values[(values >= lo) & (values <= hi)], bins=edges)[0]
    counts = np.concatenate([[under], inner, [over]])
    return edges, counts


class HistogramRecorder:
    """Update listener that histograms batch rewards and critic targets.

    One snapshot per crossing of `cadence` environment steps. Bins span the
    running range over everything seen at earlier snapshots, so a late outlier
    lands in an overflow bin; the range then widens for the next snapshot.
    """

    def __init__(self, cadence=10_000, bins=64):
        if cadence < 1:
            raise ValueError("cadence must be >= 1")
        self.cadence = int(cadence)
        self.bins = int(bins)
        self.rows = []
        self._tick = 0
        self._range = {"reward": None, "target": None}

    def __call__(self, payload):
        tick = payload["env_step"] // self.cadence
        if tick <= self._tick:
            return
        self._tick = tick
        for kind, values in (
            ("reward", np.asarray(payload["batch"].rewards, dtype=float)),
            ("target", np.asarray(payload["targets"], dtype=float)),
        ):
            span = self._range[kind]
            if span is None:
                span = (float(values.min()), float(values.max()))
            edges, counts = histogram_counts(values, span[0], span[1], self.bins)
            full = np.concatenate([[-np.inf], edges, [np.inf]])
            for b in range(counts.size):
                self.rows.append(
                    {
                        "env_step": int(payload["env_step"]),
                        "kind": kind,
                        "bin": b,
                        "left": float(full[b]),
                        "right": float(full[b + 1]),
                        "count": int(counts[b]),
                    }
                )
            self._range[kind] = (
                min(span[0], float(values.min())),
                max(span[1], float(values.max())),
            )

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["env_step", "kind", "bin", "left", "right", "count"]
            )
            writer.writeheader()
            writer.writerows(self.rows)


# -- cross-run curve aggregation ----------------------------------------------------


def aggregate(curves, baselines, grid_points=101, trim=0.25):
    """Normalize learning curves and reduce them to mean, median, and IQM.

    Each curve is {"task", "steps", "returns"}. Steps are scaled by that run's
    own budget and returns by the task baseline's final return, then every
    curve is interpolated onto a shared unit grid. Curves whose task has no
    baseline are skipped with a warning.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    rows = []
    excluded = []
    for curve in curves:
        task = curve["task"]
        if task not in baselines:
            if task not in excluded:
                warnings.warn(f"no baseline return for task {task}; curve excluded")
                excluded.append(task)
            continue
        base = float(baselines[task])
        if base == 0.0:
            raise ValueError(f"baseline return for task {task} is zero")
        steps = np.asarray(curve["steps"], dtype=float)
        returns = np.asarray(curve["returns"], dtype=float)
        if steps.size == 0 or steps.max() <= 0:
            raise ValueError(f"curve for task {task} has no positive steps")
        rows.append(np.interp(grid, steps / steps.max(), returns / base))
    if not rows:
        raise ValueError("no curves left to aggregate")
    stack = np.stack(rows)
    return {
        "grid": grid,
        "mean": stack.mean(axis=0),
        "median": np.median(stack, axis=0),
        "iqm": trim_mean(stack, trim, axis=0),
        "curves_used": len(rows),
        "excluded_tasks": excluded,
    }


def read_metrics(path):
    """Load a metrics CSV into {column: float array} (nan for empty cells)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in columns:
                cell = row[name]
                columns[name].append(float(cell) if cell not in ("", None) else float("nan"))
    return {name: np.asarray(vals) for name, vals in columns.items()}
