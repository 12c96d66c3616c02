"""End-to-end acceptance gate: ten checks with hard tolerances and time budgets.

Every test prints one [PASS]/[FAIL] line with the measured quantities so the
gate can be audited from the log alone. The two training-heavy checks (the
ablation grid and the critic-error experiment) share one set of pendulum runs
through a session fixture; everything else is self-contained and fast.
"""

import copy
import time

import numpy as np
import pytest

import dhrl.rollouts
from dhrl.actor_critic import QBounds
from dhrl.algo import AlgoConfig, Trainer
from dhrl.analysis import grad_bias_sem, rmedse_experiment
from dhrl.autodiff.tensor import Tape, Tensor
from dhrl.buffers import NormStats
from dhrl.cli import main as cli_main
from dhrl.rollouts import (
    Trajectory,
    mve_q,
    mve_value,
    target_q,
    training_rollout,
    value_gradient,
)
from dhrl.world_model import fit, offline_rmse

from helpers import (
    LinearGaussianPolicy,
    LinearQuadraticSampler,
    QuadraticCritic,
    SquashedLinearPolicy,
    discounted_sum,
    fd_grad,
    flat_params,
    rel_err,
    set_flat_params,
)
from test_algo import SHORT, TASK, tiny_config
from test_cli import write_config
from test_rollouts import make_critics, make_sampler, wide_bounds
from test_world_model import fitted_stats, linear_dataset, make_buffer, make_model

pytestmark = pytest.mark.acceptance


def announce(capsys, number, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number} ({label}): {detail}")


# -- shared desk-scale pendulum grid -------------------------------------------------

DESK = dict(
    seed_steps=2000,
    batch_size=32,
    dr_batch=128,
    actor_hidden=32,
    critic_hidden=32,
    model_hidden=32,
    model_members=4,
    critic_members=3,
    model_max_epochs=25,
    eval_every=3000,
    eval_episodes=10,
)
GRID_SEEDS = (0, 1, 2, 3, 4)
GRID_STEPS = 30_000
RMEDSE_ITERATIONS = 2000


@pytest.fixture(scope="session")
def pendulum_grid(tmp_path_factory):
    """Train 3 variants x 5 seeds on pendulum swing-up; returns finals and run dirs."""
    root = tmp_path_factory.mktemp("grid")
    started = time.perf_counter()
    results = {}
    for dr, tr in ((20, 5), (0, 5), (20, 0)):
        finals, dirs = [], []
        for seed in GRID_SEEDS:
            cfg = AlgoConfig(dr_horizon=dr, tr_horizon=tr, **DESK)
            run_dir = root / f"{TASK}_d{dr}t{tr}_seed{seed}"
            trainer = Trainer(cfg, TASK, seed, run_dir=run_dir)
            rows = trainer.train(GRID_STEPS)
            finals.append(rows[-1]["test_return_mean"])
            dirs.append(run_dir)
        results[(dr, tr)] = {"finals": np.array(finals), "dirs": dirs}
    results["elapsed"] = time.perf_counter() - started
    return results


# -- criterion 1: value gradient vs finite differences --------------------------------


def test_criterion_1_gradient_correctness(capsys):
    started = time.perf_counter()
    sampler = make_sampler(members=2, seed=10)
    policy = SquashedLinearPolicy(2, [-1.0], [1.0], seed=11)
    critics = make_critics(seed=12)
    starts = np.random.default_rng(13).standard_normal((6, 2))
    alpha, gamma = 0.05, 0.9

    def objective(vec):
        set_flat_params(policy.params, vec)
        with Tape():
            traj = training_rollout(sampler, policy, starts, 3, np.random.default_rng(99))
            value = mve_value(traj, critics, alpha, gamma)
        return float(np.mean(value.data))

    theta = flat_params(policy.params)
    assert theta.size == 4
    want = fd_grad(objective, theta.copy())
    set_flat_params(policy.params, theta)
    report = value_gradient(
        sampler, policy, critics, starts, 3, alpha, gamma, np.random.default_rng(99), ceiling=1e9
    )
    err = rel_err(report.gradient, want)
    elapsed = time.perf_counter() - started
    ok = err <= 1e-4 and elapsed < 10.0
    announce(
        capsys, 1, "T=3 value gradient vs finite differences",
        ok, f"rel err {err:.2e} (tol 1e-4), {elapsed:.1f}s (budget 10s)",
    )
    assert ok


# -- criterion 2: estimator oracles ---------------------------------------------------


def test_criterion_2_estimator_oracles(capsys):
    rng = np.random.default_rng(20)
    critics = make_critics(members=3, seed=21)
    bounds = wide_bounds(gamma=0.9)
    worst_v = 0.0
    worst_q = 0.0
    n = 3
    for k in range(1000):
        horizon = int(rng.integers(1, 6))
        alpha = float(rng.uniform(0.0, 0.5))
        gamma = float(rng.uniform(0.8, 0.999))
        states = [rng.standard_normal((n, 2)) for _ in range(horizon + 1)]
        actions = [rng.standard_normal((n, 1)) for _ in range(horizon + 1)]
        lps = [rng.standard_normal(n) for _ in range(horizon + 1)]
        rewards = [rng.standard_normal(n) for _ in range(horizon)]

        tape_traj = Trajectory(
            [Tensor(s) for s in states],
            [Tensor(a) for a in actions],
            [Tensor(l) for l in lps],
            [Tensor(r) for r in rewards],
            np.ones(n, dtype=bool),
            0,
            horizon,
        )
        got_v = mve_value(tape_traj, critics, alpha, gamma).data
        term_v = critics.actor_forward(Tensor(states[-1]), Tensor(actions[-1])).data
        np_traj = Trajectory(states, actions, lps, rewards, np.ones(n, dtype=bool), 0, horizon)
        seed_k = [22, k]
        got_q, _ = mve_q(np_traj, critics, bounds, alpha, gamma,
                         np.random.default_rng(np.random.SeedSequence(seed_k)))
        term_q = target_q(critics, bounds, states[-1], actions[-1],
                          np.random.default_rng(np.random.SeedSequence(seed_k)))
        for i in range(n):
            soft = [rewards[t][i] - alpha * lps[t][i] for t in range(horizon)]
            want_v = discounted_sum(soft, gamma) + gamma**horizon * (
                term_v[i] - alpha * lps[horizon][i]
            )
            worst_v = max(worst_v, rel_err(got_v[i], want_v))
            want_q = (
                rewards[0][i]
                + sum(gamma**t * (rewards[t][i] - alpha * lps[t][i]) for t in range(1, horizon))
                + gamma**horizon * (term_q[i] - alpha * lps[horizon][i])
            )
            worst_q = max(worst_q, rel_err(got_q[i], want_q))

    # T = 0 reduction of the value expansion: exact soft terminal value
    s0, a0 = rng.standard_normal((n, 2)), rng.standard_normal((n, 1))
    lp0 = rng.standard_normal(n)
    traj0 = Trajectory([Tensor(s0)], [Tensor(a0)], [Tensor(lp0)], [],
                       np.ones(n, dtype=bool), 0, 0)
    v0 = mve_value(traj0, critics, 0.3, 0.9).data
    exact0 = critics.actor_forward(Tensor(s0), Tensor(a0)).data - 0.3 * lp0
    t0_exact = np.array_equal(v0, exact0)

    # T = 1 reduction of the Q expansion: exact one-step bootstrap
    s1 = [rng.standard_normal((n, 2)) for _ in range(2)]
    a1 = [rng.standard_normal((n, 1)) for _ in range(2)]
    lp1 = [rng.standard_normal(n) for _ in range(2)]
    r1 = [rng.standard_normal(n)]
    traj1 = Trajectory(s1, a1, lp1, r1, np.ones(n, dtype=bool), 0, 1)
    got1, _ = mve_q(traj1, critics, bounds, 0.3, 0.9,
                    np.random.default_rng(np.random.SeedSequence([23])))
    boot = target_q(critics, bounds, s1[-1], a1[-1],
                    np.random.default_rng(np.random.SeedSequence([23])))
    exact1 = r1[0] + 0.9 * (boot - 0.3 * lp1[-1])
    t1_exact = np.array_equal(got1, exact1)

    ok = worst_v <= 1e-10 and worst_q <= 1e-10 and t0_exact and t1_exact
    announce(
        capsys, 2, "value/Q expansion vs discounted-sum oracle",
        ok,
        f"1000 trajectories, worst rel err V {worst_v:.2e} Q {worst_q:.2e} (tol 1e-10), "
        f"T=0 exact {t0_exact}, T=1 exact {t1_exact}",
    )
    assert ok


# -- criterion 3: variant reductions ---------------------------------------------------


def _recompute_one_step_targets(trainer, batch, cfg):
    """Independent one-step soft-target construction from raw primitives."""
    rng = np.random.default_rng()
    rng.bit_generator.state = copy.deepcopy(trainer.rng.bit_generator.state)
    mirror = QBounds(cfg.gamma, eta=cfg.bounds_momentum)
    mirror.load_state_array(trainer.bounds.state_array())
    mirror.update(batch.rewards)
    actions, log_probs = trainer.policy.sample_np(batch.next_states, rng)
    pair = rng.choice(trainer.critics.members, size=2, replace=False)
    q_pair = trainer.critics.target_np(batch.next_states, actions)[pair].min(axis=0)
    q_pair = np.clip(q_pair, mirror.q_low, mirror.q_high)
    boot = np.where(batch.terminated.astype(bool), 0.0, q_pair - trainer.temp.alpha * log_probs)
    return batch.rewards + cfg.gamma * boot


def test_criterion_3_variant_reductions(capsys):
    # (D,T) = (20,0): one-step targets on model-buffer batches
    cfg = tiny_config(dr_horizon=20, tr_horizon=0, dr_batch=32, updates_per_dr=20)
    trainer = Trainer(cfg, TASK, 5, task_overrides=SHORT)
    worst = 0.0
    sources_mbpo = set()
    checks = 0
    original = trainer.critic_update

    def spy(batch):
        nonlocal worst, checks
        sources_mbpo.add(batch.source)
        mine = _recompute_one_step_targets(trainer, batch, cfg)
        loss, targets, valid = original(batch)
        worst = max(worst, float(np.max(np.abs(mine - targets))))
        checks += 1
        return loss, targets, valid

    trainer.critic_update = spy
    trainer.train(160)
    mbpo_ok = checks > 0 and worst <= 1e-12 and sources_mbpo == {"model"}

    # (D,T) = (0,5): every batch must come from the environment replay buffer
    sources_svg = []
    trainer2 = Trainer(
        tiny_config(dr_horizon=0, tr_horizon=5),
        TASK,
        6,
        task_overrides=SHORT,
        update_listener=lambda payload: sources_svg.append(payload["batch"].source),
    )
    trainer2.train(160)
    svg_ok = len(sources_svg) > 0 and set(sources_svg) == {"replay"}

    ok = mbpo_ok and svg_ok
    announce(
        capsys, 3, "variant reductions",
        ok,
        f"(20,0): {checks} batches from {sorted(sources_mbpo)}, max target diff "
        f"{worst:.2e} (tol 1e-12); (0,5): {len(sources_svg)} batches all tagged "
        f"{sorted(set(sources_svg))}",
    )
    assert ok


# -- criterion 4: normalization algebra -------------------------------------------------


def test_criterion_4_normalization_algebra(capsys):
    rng = np.random.default_rng(40)
    dim = 4
    stats = NormStats(dim)
    for _ in range(3):
        scale = rng.uniform(0.5, 3.0)
        stats.update(
            rng.standard_normal((300, dim)) * scale + rng.uniform(-2.0, 2.0),
            rng.standard_normal((300, dim)) * rng.uniform(0.5, 2.0),
            rng.standard_normal(300),
        )
    s_norm = rng.standard_normal((100_000, dim))
    d_norm = rng.standard_normal((100_000, dim))
    fused = stats.normalized_successor(s_norm, d_norm)
    successor = stats.denormalize_states(s_norm) + (stats.delta_mean + stats.delta_std * d_norm)
    explicit = stats.normalize_states(successor)
    err = rel_err(fused, explicit)
    ok = err <= 1e-12
    announce(
        capsys, 4, "normalized successor vs explicit pipeline",
        ok, f"1e5 inputs, rel err {err:.2e} (tol 1e-12)",
    )
    assert ok


# -- criterion 5: Q bounds -----------------------------------------------------------


def test_criterion_5_q_bounding(capsys, monkeypatch):
    bounds = QBounds(0.995, eta=0.95)
    for _ in range(5):
        bounds.update(np.ones(512))
    formula_gap = abs(bounds.q_low - 200.0)
    formula_ok = bounds.q_low == bounds.q_high and formula_gap <= 1e-9

    counts = {"targets": 0, "violations": 0, "unclipped": 0}
    production = dhrl.rollouts.target_q

    def recording_target_q(critics, bnds, states, actions, rng):
        out = production(critics, bnds, states, actions, rng)
        if bnds.initialized:
            counts["targets"] += out.size
            bad = (out < bnds.q_low) | (out > bnds.q_high)
            counts["violations"] += int(np.count_nonzero(bad))
        else:
            counts["unclipped"] += out.size
        return out

    monkeypatch.setattr(dhrl.rollouts, "target_q", recording_target_q)
    Trainer(tiny_config(), TASK, 7, task_overrides=SHORT).train(200)
    Trainer(
        tiny_config(dr_horizon=20, tr_horizon=0, dr_batch=32), TASK, 8, task_overrides=SHORT
    ).train(200)
    run_ok = counts["targets"] > 0 and counts["violations"] == 0 and counts["unclipped"] == 0

    ok = formula_ok and run_ok
    announce(
        capsys, 5, "Q bounds",
        ok,
        f"rewards=1, gamma=0.995 -> Q_l=Q_u={bounds.q_low!r} (|diff from 200| "
        f"{formula_gap:.1e}); {counts['targets']} terminal values clipped over two full "
        f"runs, {counts['violations']} outside [Q_l, Q_u], {counts['unclipped']} unclipped",
    )
    assert ok


# -- criterion 6: model training -------------------------------------------------------


def test_criterion_6_model_training(capsys):
    started = time.perf_counter()
    noise = 0.05
    states, actions, rewards, next_states = linear_dataset(2500, noise=noise, seed=8)
    head, tail = slice(0, 2000), slice(2000, 2500)
    stats = fitted_stats(states[head], next_states[head], rewards[head])
    buf = make_buffer(states[head], actions[head], rewards[head], next_states[head])
    model = make_model(state_dim=2, action_dim=1, members=4, hidden=32, seed=9)
    fit(model, buf, stats, np.random.default_rng(10), lr=3e-3, batch_size=256, max_epochs=150)
    splits = {"holdout": (states[tail], actions[tail], rewards[tail], next_states[tail])}
    rmse = offline_rmse(model, stats, splits)["holdout"]
    rmse_ok = rmse <= 2.0 * noise

    # negative learning rate drives validation strictly worse from epoch 0
    s2, a2, r2, n2 = linear_dataset(300, seed=12)
    frozen = make_model(state_dim=2, action_dim=1, members=2, hidden=8, seed=13)
    report = fit(
        frozen,
        make_buffer(s2, a2, r2, n2),
        fitted_stats(s2, n2, r2),
        np.random.default_rng(14),
        lr=-0.05,
        max_epochs=100,
    )
    stop_ok = (
        report.stopped_early
        and report.best_epoch == 0
        and report.epochs_run == report.patience
    )
    elapsed = time.perf_counter() - started
    ok = rmse_ok and stop_ok and elapsed < 120.0
    announce(
        capsys, 6, "model fitting",
        ok,
        f"holdout RMSE {rmse:.4f} (cap {2 * noise:.2f}); worsening validation stopped at "
        f"epoch {report.epochs_run} with patience {report.patience}; "
        f"{elapsed:.0f}s (budget 120s)",
    )
    assert ok


# -- criterion 7: bias/SEM trade-off ----------------------------------------------------


def test_criterion_7_bias_sem_tradeoff(capsys):
    started = time.perf_counter()
    sampler = LinearQuadraticSampler(0.9, 0.5, 0.3, 0.5, 0.1)
    policy = LinearGaussianPolicy(-0.4, 0.1, 0.2)
    critic = QuadraticCritic(0.5, 0.3, -0.4)
    states = 0.05 * np.random.default_rng(3).standard_normal((256, 1)) + 0.5
    records = grad_bias_sem(
        sampler, policy, critic, states,
        horizons=[1, 3, 5, 7, 9], rollouts=256, alpha=0.0, gamma=0.9, t_star=9, seed=0,
    )
    bias = [r.bias for r in records]
    sem = [r.sem for r in records]
    bias_holds = sum(bias[i + 1] <= bias[i] for i in range(4))
    sem_holds = sum(sem[i + 1] >= sem[i] for i in range(4))
    elapsed = time.perf_counter() - started
    ok = bias_holds >= 4 and sem_holds >= 4 and elapsed < 300.0
    announce(
        capsys, 7, "gradient bias/SEM trade-off",
        ok,
        f"B=R=256, horizons 1..9: bias non-increasing {bias_holds}/4, SEM non-decreasing "
        f"{sem_holds}/4, bias {bias[0]:.2e}->{bias[-1]:.2e}, SEM {sem[0]:.2e}->{sem[-1]:.2e}, "
        f"{elapsed:.0f}s (budget 300s)",
    )
    assert ok


# -- criterion 8: ablation ordering ------------------------------------------------------


def test_criterion_8_ablation_ordering(capsys, pendulum_grid):
    dh = pendulum_grid[(20, 5)]["finals"]
    svg = pendulum_grid[(0, 5)]["finals"]
    mbpo = pendulum_grid[(20, 0)]["finals"]
    weaker = svg if svg.mean() <= mbpo.mean() else mbpo
    pooled_se = float(np.sqrt(dh.var(ddof=1) / dh.size + weaker.var(ddof=1) / weaker.size))
    ordering = dh.mean() >= svg.mean() and dh.mean() >= mbpo.mean()
    margin = dh.mean() >= weaker.mean() + pooled_se
    elapsed = pendulum_grid["elapsed"]
    ok = ordering and margin and elapsed < 7200.0
    announce(
        capsys, 8, "ablation ordering",
        ok,
        f"final means over 5 seeds: (20,5) {dh.mean():.1f}, (0,5) {svg.mean():.1f}, "
        f"(20,0) {mbpo.mean():.1f}; margin over weaker {dh.mean() - weaker.mean():.1f} "
        f"vs pooled SE {pooled_se:.1f}; grid took {elapsed / 60:.0f} min (budget 120 min)",
    )
    assert ok


# -- criterion 9: critic-error direction ---------------------------------------------------


def test_criterion_9_rmedse_direction(capsys, pendulum_grid):
    started = time.perf_counter()
    run_dir = pendulum_grid[(20, 5)]["dirs"][0]
    shared = dict(
        seeds=list(range(8)),
        probes=256,
        mc_rollouts=256,
        iterations=RMEDSE_ITERATIONS,
        record_every=RMEDSE_ITERATIONS // 4,
        mc_horizon=800,
        seed=0,
    )
    quarter = RMEDSE_ITERATIONS // 4
    with_dr = rmedse_experiment(run_dir, with_dr=True, **shared)
    without_dr = rmedse_experiment(run_dir, with_dr=False, **shared)
    e_with = float(np.mean([r.value for r in with_dr if r.iteration == quarter]))
    e_without = float(np.mean([r.value for r in without_dr if r.iteration == quarter]))
    elapsed = time.perf_counter() - started
    ok = e_with < e_without and elapsed < 1800.0
    announce(
        capsys, 9, "relative critic error with vs without distribution rollouts",
        ok,
        f"mean E over 8 seeds at iteration {quarter}/{RMEDSE_ITERATIONS}: with-DR "
        f"{e_with:.4f} < without-DR {e_without:.4f}; {elapsed / 60:.1f} min (budget 30 min)",
    )
    assert ok


# -- criterion 10: determinism --------------------------------------------------------------


def test_criterion_10_determinism(capsys, tmp_path):
    cfg = write_config(tmp_path / "tiny.cfg", steps=400)
    for root in ("a", "b"):
        rc = cli_main(
            ["train", "--seed", "9", "--config", str(cfg), "--out", str(tmp_path / root)]
        )
        assert rc == 0
    name = f"{TASK}_d3t2_seed9"
    first = (tmp_path / "a" / name / "metrics.csv").read_bytes()
    second = (tmp_path / "b" / name / "metrics.csv").read_bytes()
    rows = len(first.splitlines()) - 1
    ok = first == second and rows >= 10
    announce(
        capsys, 10, "training determinism",
        ok, f"two identical train invocations: metrics files equal={first == second}, "
        f"{rows} evaluation rows each",
    )
    assert ok
