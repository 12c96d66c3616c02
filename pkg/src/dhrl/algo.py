"""Episode-driven actor-critic training with two model-rollout horizons.

One outer iteration collects a full episode, refits the model ensemble, and
runs (env steps x UTD) alternating critic/actor updates. Long gradient-free
rollouts refresh the model buffer on a fixed cadence; short differentiable
rollouts shape both the critic targets and the policy gradient. The two
horizons select the algorithm family:

  dr_horizon > 0, tr_horizon > 0   full double-horizon training
  dr_horizon = 0, tr_horizon > 0   value expansion on replay batches
  dr_horizon > 0, tr_horizon = 0   one-step targets on model-generated data
  dr_horizon = 0, tr_horizon = 0   model-free soft actor-critic
"""

import copy
import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .actor_critic import CriticEnsemble, EntropyTemp, Policy, QBounds
from .autodiff import tensor as T
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape
from .buffers import ModelBuffer, NormStats, ReplayBuffer, Transition
from .envs import Env, EnvFault, evaluate, make_task
from .rollouts import ModelSampler, critic_targets, distribution_rollout, value_gradient
from .world_model import EnsembleGaussianModel, fit

METRICS_COLUMNS = (
    "env_step",
    "episode",
    "test_return_mean",
    "test_return_std",
    "critic_loss",
    "actor_objective",
    "alpha",
    "grad_norm",
    "Q_l",
    "Q_u",
    "model_stop_epoch",
)

MAX_CONSECUTIVE_FAULTS = 10


@dataclass
class AlgoConfig:
    """Hyperparameters for one training run; defaults are the shared full-scale set."""

    gamma: float = 0.995
    seed_steps: int = 5000
    batch_size: int = 256
    utd: int = 1
    dr_horizon: int = 20
    tr_horizon: int = 5
    updates_per_dr: int = 20
    dr_batch: int = 1024
    model_members: int = 8
    critic_members: int = 5
    target_momentum: float = 0.995
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    model_lr: float = 1e-3
    alpha_init: float = 0.1
    replay_capacity: int = 1_000_000
    actor_hidden: int = 512
    critic_hidden: int = 512
    model_hidden: int = 256
    grad_ceiling: float = 100.0
    bounds_momentum: float = 0.95
    model_batch_size: int = 256
    model_holdout: float = 0.2
    model_patience: int = 5
    model_max_epochs: int = 1000
    eval_every: int = 1000
    eval_episodes: int = 10
    checkpoint_every: int = 0
    action_repeat: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.utd != int(self.utd) or self.utd < 1:
            raise ValueError("utd must be an integer >= 1")
        if self.dr_horizon < 0 or self.tr_horizon < 0:
            raise ValueError("rollout horizons must be >= 0")
        if self.updates_per_dr < 1:
            raise ValueError("updates_per_dr must be >= 1")
        if self.batch_size < 1 or self.dr_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.seed_steps < 0:
            raise ValueError("seed_steps must be >= 0")

    @property
    def uses_model(self):
        return self.dr_horizon > 0 or self.tr_horizon > 0


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _empty_window():
    return {"critic_loss": [], "actor_objective": [], "grad_norm": []}


def critic_step(critics, optimizer, sampler, policy, bounds, batch, horizon, alpha, gamma, rng, ema=None):
    """One regression step of all critic members onto shared expansion targets.

    Rows whose rollout went non-finite get zero weight so the loss stays a mean
    over usable rows. Returns (loss, targets, valid).
    """
    targets, valid = critic_targets(
        sampler, policy, critics, bounds, batch, horizon, alpha, gamma, rng
    )
    n_valid = int(np.count_nonzero(valid))
    weights = valid.astype(float) / (critics.members * max(n_valid, 1))
    with Tape() as tape:
        preds = critics.train_forward(batch.states, batch.actions, rng)
        err = T.sub(preds, np.where(valid, targets, 0.0))
        loss = T.sum_(T.mul(T.square(err), weights))
        critics.params.zero_grad()
        tape.backward(loss)
    optimizer.step()
    if ema is not None:
        critics.ema_update(ema)
    return float(loss.data), targets, valid


class Trainer:
    """Owns every stateful piece of one run and advances it episode by episode."""

    def __init__(
        self,
        config,
        task_id,
        seed,
        run_dir=None,
        task_overrides=None,
        update_listener=None,
        fresh=True,
    ):
        if int(seed) < 0:
            raise ValueError("seed must be >= 0")
        self.config = config
        self.task_id = task_id
        self.seed = int(seed)
        self.task_overrides = dict(task_overrides or {})
        overrides = dict(self.task_overrides)
        if config.action_repeat:
            overrides.setdefault("action_repeat", config.action_repeat)
        self.task = make_task(task_id, **overrides)
        self.update_listener = update_listener

        s_dim, a_dim = self.task.state_dim, self.task.action_dim
        env_seed, init_seed, train_seed = np.random.SeedSequence(self.seed).spawn(3)
        self.env = Env(self.task, env_seed)
        init_rng = np.random.default_rng(init_seed)
        self.policy = Policy(
            s_dim,
            a_dim,
            self.task.action_low,
            self.task.action_high,
            hidden=config.actor_hidden,
            rng=init_rng,
        )
        self.critics = CriticEnsemble(
            s_dim, a_dim, members=config.critic_members, hidden=config.critic_hidden, rng=init_rng
        )
        if config.uses_model:
            self.model = EnsembleGaussianModel(
                s_dim, a_dim, members=config.model_members, hidden=config.model_hidden, rng=init_rng
            )
        else:
            self.model = None
        self.stats = NormStats(s_dim)
        self.sampler = ModelSampler(self.model, self.stats) if self.model is not None else None
        self.model_buffer = (
            ModelBuffer(config.dr_batch * config.dr_horizon, s_dim, a_dim)
            if config.dr_horizon > 0
            else None
        )
        self.replay = ReplayBuffer(config.replay_capacity, s_dim, a_dim)
        self.temp = EntropyTemp(a_dim, init=config.alpha_init, lr=config.alpha_lr)
        self.bounds = QBounds(config.gamma, eta=config.bounds_momentum)
        self.actor_opt = AdamW(self.policy.params, lr=config.actor_lr)
        self.critic_opt = AdamW(self.critics.params, lr=config.critic_lr)
        self.rng = np.random.default_rng(train_seed)

        self.env_step = 0
        self.episode = 0
        self.updates = 0
        self.incidents = 0
        self.consecutive_faults = 0
        self.eval_tick = 0
        self.model_stop_epoch = -1
        self.dr_refreshes = 0
        self.dr_truncated = 0
        self.clipped_updates = 0
        self.masked_rows = 0
        self.last_return = float("nan")
        self.metrics_rows = []
        self._window = _empty_window()

        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.metrics_path = self.run_dir / "metrics.csv"
            if fresh:
                self.run_dir.mkdir(parents=True, exist_ok=True)
                self._write_manifest()
                with open(self.metrics_path, "w") as fh:
                    fh.write(",".join(METRICS_COLUMNS) + "\n")
            elif not self.metrics_path.exists():
                raise FileNotFoundError(f"no metrics file to append to in {self.run_dir}")

    # -- interaction -----------------------------------------------------------

    def collect_episode(self):
        """Roll one episode; uniform actions until the seed-step budget is spent."""
        task = self.task
        state = self.env.reset()
        transitions = []
        total = 0.0
        while True:
            if self.env_step + self.env.physics_steps < self.config.seed_steps:
                action = self.rng.uniform(task.action_low, task.action_high)
            else:
                action = self.policy.sample_np(state[None], self.rng)[0][0]
            result = self.env.step(action)
            transitions.append(
                Transition(
                    state=state.copy(),
                    action=np.asarray(action, dtype=float).copy(),
                    reward=result.reward,
                    next_state=result.next_state,
                    terminated=result.terminated,
                    truncated=result.truncated,
                )
            )
            total += result.reward
            state = result.next_state
            if result.terminated or result.truncated:
                break
        return transitions, self.env.physics_steps, total

    # -- one update ------------------------------------------------------------

    def critic_update(self, batch):
        """Regress all critic members onto shared targets; returns (loss, targets, valid)."""
        cfg = self.config
        return critic_step(
            self.critics,
            self.critic_opt,
            self.sampler,
            self.policy,
            self.bounds,
            batch,
            cfg.tr_horizon,
            self.temp.alpha,
            cfg.gamma,
            self.rng,
            ema=cfg.target_momentum,
        )

    def actor_update(self, start_states):
        """One ascent step through the differentiable rollout, then a temperature step."""
        cfg = self.config
        report = value_gradient(
            self.sampler,
            self.policy,
            self.critics,
            start_states,
            cfg.tr_horizon,
            self.temp.alpha,
            cfg.gamma,
            self.rng,
            ceiling=cfg.grad_ceiling,
        )
        self.actor_opt.step()
        self.temp.update(report.log_probs0)
        return report

    def _run_updates(self, n_updates):
        cfg = self.config
        for i in range(n_updates):
            if self.model_buffer is not None and i % cfg.updates_per_dr == 0:
                self.model_buffer.clear()
                dr = distribution_rollout(
                    self.sampler,
                    self.policy,
                    self.replay,
                    self.model_buffer,
                    cfg.dr_batch,
                    cfg.dr_horizon,
                    self.rng,
                )
                self.dr_refreshes += 1
                self.dr_truncated += dr.truncated_branches
            if self.model_buffer is not None and len(self.model_buffer) > 0:
                batch = self.model_buffer.sample(cfg.batch_size, self.rng)
            else:
                batch = self.replay.sample(cfg.batch_size, self.rng)
            pre_state = (
                copy.deepcopy(self.rng.bit_generator.state) if self.update_listener else None
            )
            alpha = self.temp.alpha
            loss, targets, valid = self.critic_update(batch)
            actor = self.actor_update(batch.states)
            self.updates += 1
            self.clipped_updates += int(actor.clipped)
            self.masked_rows += actor.masked_rows
            window = self._window
            window["critic_loss"].append(loss)
            window["actor_objective"].append(actor.objective)
            window["grad_norm"].append(actor.grad_norm)
            if self.update_listener:
                self.update_listener(
                    {
                        "env_step": self.env_step,
                        "episode": self.episode,
                        "update_index": i,
                        "batch": batch,
                        "alpha": alpha,
                        "rng_state": pre_state,
                        "targets": targets,
                        "valid": valid,
                        "critic_loss": loss,
                        "actor": actor,
                        "bounds": (self.bounds.q_low, self.bounds.q_high),
                    }
                )
        if self.model_buffer is not None:
            self.model_buffer.clear()

    # -- outer loop --------------------------------------------------------------

    def run_iteration(self):
        """One outer pass: collect an episode, fit the model, update, evaluate."""
        cfg = self.config
        try:
            transitions, steps, ep_return = self.collect_episode()
        except EnvFault:
            self.incidents += 1
            self.consecutive_faults += 1
            if self.consecutive_faults >= MAX_CONSECUTIVE_FAULTS:
                raise RuntimeError(
                    f"{self.consecutive_faults} environment faults in a row; giving up"
                )
            return
        self.consecutive_faults = 0
        states = np.stack([t.state for t in transitions])
        next_states = np.stack([t.next_state for t in transitions])
        rewards = np.array([t.reward for t in transitions])
        for tr in transitions:
            self.replay.push(tr)
        self.stats.update(states, next_states - states, rewards)
        self.env_step += steps
        self.episode += 1
        self.last_return = ep_return
        if self.env_step >= cfg.seed_steps:
            if self.model is not None:
                report = fit(
                    self.model,
                    self.replay,
                    self.stats,
                    self.rng,
                    lr=cfg.model_lr,
                    batch_size=cfg.model_batch_size,
                    holdout_frac=cfg.model_holdout,
                    patience_base=cfg.model_patience,
                    max_epochs=cfg.model_max_epochs,
                )
                self.model_stop_epoch = report.epochs_run
            self._run_updates(steps * cfg.utd)
        self._maybe_eval()
        if (
            self.run_dir is not None
            and cfg.checkpoint_every
            and self.episode % cfg.checkpoint_every == 0
        ):
            self.save_checkpoint()

    def train(self, total_env_steps):
        """Run outer iterations until the step budget is met; returns metrics rows."""
        while self.env_step < int(total_env_steps):
            self.run_iteration()
        if self.run_dir is not None:
            self.save_checkpoint()
        return self.metrics_rows

    # -- evaluation and metrics ----------------------------------------------------

    def _maybe_eval(self):
        cfg = self.config
        tick = self.env_step // cfg.eval_every
        if tick <= self.eval_tick:
            return
        self.eval_tick = tick

        def act(state, rng):
            return self.policy.mean_np(state[None])[0]

        stats = evaluate(
            self.task,
            act,
            n_episodes=cfg.eval_episodes,
            seed=np.random.SeedSequence([self.seed, self.env_step]),
        )
        window = self._window
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        row = {
            "env_step": self.env_step,
            "episode": self.episode,
            "test_return_mean": stats.mean,
            "test_return_std": stats.std,
            "critic_loss": mean(window["critic_loss"]),
            "actor_objective": mean(window["actor_objective"]),
            "alpha": self.temp.alpha,
            "grad_norm": mean(window["grad_norm"]),
            "Q_l": self.bounds.q_low if self.bounds.initialized else float("nan"),
            "Q_u": self.bounds.q_high if self.bounds.initialized else float("nan"),
            "model_stop_epoch": self.model_stop_epoch,
        }
        self.metrics_rows.append(row)
        self._write_row(row)
        self._window = _empty_window()

    def _write_row(self, row):
        if self.run_dir is None:
            return
        line = ",".join(_fmt(row[c]) for c in METRICS_COLUMNS)
        with open(self.metrics_path, "a") as fh:
            fh.write(line + "\n")

    def _write_manifest(self):
        manifest = {
            "task": self.task_id,
            "task_overrides": self.task_overrides,
            "seed": self.seed,
            "config": asdict(self.config),
            "model": "enabled" if self.config.uses_model else "disabled",
            "code_version": __version__,
            "created": datetime.now(timezone.utc).isoformat(),
        }
        with open(self.run_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- persistence -----------------------------------------------------------------

    def save_checkpoint(self):
        """Write a resumable snapshot of every stateful component."""
        if self.run_dir is None:
            raise RuntimeError("checkpointing requires a run directory")
        ckpt = self.run_dir / "checkpoint"
        ckpt.mkdir(parents=True, exist_ok=True)
        arrays = {}

        def put(prefix, mapping):
            for name, arr in mapping.items():
                arrays[f"{prefix}/{name}"] = arr

        put("policy", self.policy.params.to_arrays())
        put("critic", self.critics.params.to_arrays())
        put("critic_target", self.critics.target)
        put("stats", self.stats.to_arrays())
        put("temp", self.temp.state_arrays())
        put("actor_opt", self.actor_opt.state_arrays())
        put("critic_opt", self.critic_opt.state_arrays())
        if self.model is not None:
            put("model", self.model.params.to_arrays())
        arrays["bounds"] = self.bounds.state_array()
        np.savez(ckpt / "state.npz", **arrays)
        self.replay.dump(ckpt / "replay.bin")
        extra = {
            "env_step": self.env_step,
            "episode": self.episode,
            "updates": self.updates,
            "incidents": self.incidents,
            "consecutive_faults": self.consecutive_faults,
            "eval_tick": self.eval_tick,
            "model_stop_epoch": self.model_stop_epoch,
            "dr_refreshes": self.dr_refreshes,
            "dr_truncated": self.dr_truncated,
            "clipped_updates": self.clipped_updates,
            "masked_rows": self.masked_rows,
            "last_return": self.last_return,
            "window": self._window,
            "rng_state": self.rng.bit_generator.state,
            "env_rng_state": self.env._rng.bit_generator.state,
        }
        with open(ckpt / "state.json", "w") as fh:
            json.dump(extra, fh, indent=2)
            fh.write("\n")

    @classmethod
    def resume(cls, run_dir, update_listener=None):
        """Rebuild a trainer from the checkpoint in `run_dir` and keep appending metrics."""
        run_dir = Path(run_dir)
        with open(run_dir / "manifest.json") as fh:
            manifest = json.load(fh)
        trainer = cls(
            AlgoConfig(**manifest["config"]),
            manifest["task"],
            manifest["seed"],
            run_dir=run_dir,
            task_overrides=manifest["task_overrides"],
            update_listener=update_listener,
            fresh=False,
        )
        ckpt = run_dir / "checkpoint"
        with np.load(ckpt / "state.npz") as blob:
            arrays = {k: blob[k] for k in blob.files}
        trainer.policy.params.load_arrays(arrays, "policy/")
        trainer.critics.params.load_arrays(arrays, "critic/")
        trainer.critics.target = {
            k[len("critic_target/") :]: v.copy()
            for k, v in arrays.items()
            if k.startswith("critic_target/")
        }
        trainer.stats = NormStats.from_arrays(arrays, "stats/")
        if trainer.sampler is not None:
            trainer.sampler.stats = trainer.stats
        trainer.temp.load_state_arrays(arrays, "temp/")
        trainer.actor_opt.load_state_arrays(arrays, "actor_opt/")
        trainer.critic_opt.load_state_arrays(arrays, "critic_opt/")
        if trainer.model is not None:
            trainer.model.params.load_arrays(arrays, "model/")
        trainer.bounds.load_state_array(arrays["bounds"])
        trainer.replay = ReplayBuffer.restore(ckpt / "replay.bin")
        with open(ckpt / "state.json") as fh:
            extra = json.load(fh)
        for key in (
            "env_step",
            "episode",
            "updates",
            "incidents",
            "consecutive_faults",
            "eval_tick",
            "model_stop_epoch",
            "dr_refreshes",
            "dr_truncated",
            "clipped_updates",
            "masked_rows",
            "last_return",
        ):
            setattr(trainer, key, extra[key])
        trainer._window = extra["window"]
        trainer.rng.bit_generator.state = extra["rng_state"]
        trainer.env._rng.bit_generator.state = extra["env_rng_state"]
        return trainer
