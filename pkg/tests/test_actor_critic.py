"""Tests for the squashed-Gaussian actor, critic ensemble, temperature, and
target-value bounds.

The policy density is checked against a numeric oracle built from the exact
Gaussian CDF pushed through the squashing map, so the change-of-variables
algebra in the implementation is verified independently.
"""

import numpy as np
import pytest
from scipy.stats import norm as normal_dist

from dhrl.actor_critic import (
    CriticEnsemble,
    EntropyTemp,
    Policy,
    QBounds,
    soft_value_np,
    target_q,
)
from dhrl.autodiff import tensor as T
from dhrl.autodiff.tensor import Tape, Tensor


def make_policy(state_dim=3, action_dim=1, low=-2.0, high=2.0, hidden=16, seed=0):
    return Policy(
        state_dim,
        action_dim,
        np.full(action_dim, low),
        np.full(action_dim, high),
        hidden=hidden,
        rng=np.random.default_rng(seed),
    )


def make_critics(state_dim=3, action_dim=1, members=5, hidden=16, seed=1, dropout=1e-4):
    return CriticEnsemble(
        state_dim,
        action_dim,
        members=members,
        hidden=hidden,
        rng=np.random.default_rng(seed),
        dropout=dropout,
    )


def constant_critic_members(values, state_dim=3, action_dim=1):
    """Ensemble whose member k always outputs values[k]."""
    crit = make_critics(state_dim, action_dim, members=len(values), hidden=8, seed=2)
    crit.head.w.data[:] = 0.0
    crit.head.b.data[:, 0] = np.asarray(values, dtype=float)
    crit.sync_target()
    return crit


# -- policy -------------------------------------------------------------------


def test_policy_actions_within_bounds():
    policy = make_policy(low=-2.0, high=2.0)
    rng = np.random.default_rng(3)
    states = 10.0 * rng.standard_normal((1000, 3))
    actions, _ = policy.sample_np(states, rng)
    assert np.all(actions > -2.0) and np.all(actions < 2.0)


def test_policy_reparam_deterministic():
    policy = make_policy()
    rng = np.random.default_rng(4)
    states = rng.standard_normal((8, 3))
    eps = rng.standard_normal((8, 1))
    a1, lp1 = policy.sample_with_eps_np(states, eps)
    a2, lp2 = policy.sample_with_eps_np(states, eps)
    assert np.array_equal(a1, a2) and np.array_equal(lp1, lp2)


def test_policy_zero_noise_gives_mean_action():
    policy = make_policy()
    rng = np.random.default_rng(5)
    states = rng.standard_normal((8, 3))
    actions, _ = policy.sample_with_eps_np(states, np.zeros((8, 1)))
    assert np.allclose(actions, policy.mean_np(states), atol=1e-14)


def test_policy_log_prob_matches_numeric_density():
    # density oracle: f(a) = d/da Phi((atanh((a - c)/k) - m)/s), differentiated
    # numerically; checked on a grid spanning 3 noise sigmas
    policy = make_policy(state_dim=2, action_dim=1, low=-2.0, high=2.0, seed=6)
    state = np.array([[0.4, -1.3]])
    mean, log_std = policy.heads_np(state)
    m, s = float(mean[0, 0]), float(np.exp(log_std[0, 0]))
    center, scale = float(policy.center[0]), float(policy.scale[0])

    eps_grid = np.linspace(-3.0, 3.0, 41)
    states = np.repeat(state, len(eps_grid), axis=0)
    actions, log_probs = policy.sample_with_eps_np(states, eps_grid[:, None])

    def cdf(a):
        u = np.arctanh((a - center) / scale)
        return normal_dist.cdf((u - m) / s)

    h = 1e-6
    densities = (cdf(actions[:, 0] + h) - cdf(actions[:, 0] - h)) / (2 * h)
    rel = np.abs(np.exp(log_probs) - densities) / densities
    assert np.max(rel) < 1e-4


def test_policy_tape_matches_numpy_path():
    policy = make_policy(seed=7)
    rng = np.random.default_rng(8)
    states = rng.standard_normal((16, 3))
    eps = rng.standard_normal((16, 1))
    a_np, lp_np = policy.sample_with_eps_np(states, eps)
    with Tape():
        a_t, lp_t = policy.sample(Tensor(states), eps)
    assert np.allclose(a_t.data, a_np, atol=1e-12)
    assert np.allclose(lp_t.data, lp_np, atol=1e-12)


def test_policy_gradients_flow_to_all_parameters():
    policy = make_policy(seed=9)
    rng = np.random.default_rng(10)
    states = rng.standard_normal((32, 3))
    eps = rng.standard_normal((32, 1))
    policy.params.zero_grad()
    with Tape() as tape:
        actions, log_probs = policy.sample(Tensor(states), eps)
        loss = T.add(T.sum_(actions), T.sum_(log_probs))
    tape.backward(loss)
    for name, t, _ in policy.params.items():
        assert t.grad is not None, name
        assert np.all(np.isfinite(t.grad)), name
    assert np.any(policy.params["head/w"].grad != 0.0)


def test_policy_log_std_clamped():
    policy = make_policy(seed=11)
    policy.head.b.data[1] = 100.0  # log-std head bias pushed far beyond the clamp
    rng = np.random.default_rng(12)
    states = rng.standard_normal((4, 3))
    _, log_std = policy.heads_np(states)
    assert np.all(log_std <= 2.0) and np.all(log_std >= -5.0)


# -- critic ensemble ----------------------------------------------------------


def test_critic_shapes_and_target_init():
    crit = make_critics()
    rng = np.random.default_rng(13)
    states = rng.standard_normal((7, 3))
    actions = rng.uniform(-1, 1, (7, 1))
    q_online = crit.forward_np(states, actions)
    q_target = crit.target_np(states, actions)
    assert q_online.shape == (5, 7)
    assert np.array_equal(q_online, q_target)  # targets start as a copy


def test_critic_eval_tape_matches_np():
    crit = make_critics(seed=14)
    rng = np.random.default_rng(15)
    states = rng.standard_normal((6, 3))
    actions = rng.uniform(-1, 1, (6, 1))
    with Tape():
        q_t = crit.actor_forward(Tensor(states), Tensor(actions))
    want = crit.forward_np(states, actions).mean(axis=0)
    assert np.allclose(q_t.data, want, atol=1e-12)


def test_redq_identical_members_equal_single():
    crit = make_critics(seed=16)
    arrays = crit.params.to_arrays()
    for name in arrays:
        if name.startswith(("q1/", "q2/", "q3/", "head/")):
            arrays[name] = np.repeat(arrays[name][:1], crit.members, axis=0)
    crit.params.load_arrays(arrays)
    crit.sync_target()
    rng = np.random.default_rng(17)
    states = rng.standard_normal((9, 3))
    actions = rng.uniform(-1, 1, (9, 1))
    got = crit.redq_target_np(states, actions, np.random.default_rng(18))
    want = crit.target_np(states, actions)[0]
    assert np.allclose(got, want, atol=1e-12)


def test_target_q_min_and_clip():
    crit = constant_critic_members([5.0, 3.0])
    states = np.zeros((4, 3))
    actions = np.zeros((4, 1))

    bounds = QBounds(gamma=0.5)
    bounds.update(np.full(100, 2.0))  # Q range [4, 4]... percentiles all 2 -> Q = 4
    assert bounds.q_low == pytest.approx(4.0)

    wide = QBounds(gamma=0.995)
    wide.q_low, wide.q_high = 0.0, 4.0
    got = target_q(crit, wide, states, actions, np.random.default_rng(19))
    assert np.allclose(got, 3.0, atol=1e-12)  # min(5,3)=3, inside [0,4]

    tight = QBounds(gamma=0.995)
    tight.q_low, tight.q_high = 0.0, 2.5
    got = target_q(crit, tight, states, actions, np.random.default_rng(20))
    assert np.allclose(got, 2.5, atol=1e-12)


def test_target_q_warns_when_uninitialized():
    crit = constant_critic_members([1.0, 2.0])
    bounds = QBounds(gamma=0.995)
    with pytest.warns(UserWarning):
        got = target_q(crit, bounds, np.zeros((2, 3)), np.zeros((2, 1)), np.random.default_rng(21))
    assert np.allclose(got, 1.0, atol=1e-12)  # unclipped min


def test_target_update_ema():
    crit = make_critics(seed=22)
    online = crit.params.to_arrays()

    crit.ema_update(1.0)  # frozen
    for name, arr in crit.target.items():
        assert np.array_equal(arr, online[name])

    crit.params["head/b"].data[:] += 1.0
    crit.ema_update(0.0)  # copy
    assert np.array_equal(crit.target["head/b"], crit.params["head/b"].data)

    # one step from 0 toward 1 with c=0.995
    crit.target["head/b"][:] = 0.0
    crit.params["head/b"].data[:] = 1.0
    crit.ema_update(0.995)
    assert np.allclose(crit.target["head/b"], 0.005, atol=1e-15)


def test_target_update_contraction():
    crit = make_critics(seed=23)
    crit.params["head/w"].data[:] = 1.0
    crit.target["head/w"][:] = 0.0
    before = np.abs(crit.target["head/w"] - crit.params["head/w"].data)
    crit.ema_update(0.995)
    after = np.abs(crit.target["head/w"] - crit.params["head/w"].data)
    assert np.allclose(after, 0.995 * before, atol=1e-12)


def test_critic_dropout_active_only_in_training():
    crit = make_critics(seed=24, dropout=0.5)
    rng = np.random.default_rng(25)
    states = rng.standard_normal((8, 3))
    actions = rng.uniform(-1, 1, (8, 1))
    with Tape():
        q_train = crit.train_forward(states, actions, np.random.default_rng(26))
        q_eval = crit.train_forward(states, actions, None)
    assert not np.allclose(q_train.data, q_eval.data)
    assert np.allclose(q_eval.data, crit.forward_np(states, actions), atol=1e-12)


# -- temperature --------------------------------------------------------------


def test_temperature_zero_gradient_at_target():
    temp = EntropyTemp(action_dim=2, init=0.1)
    before = temp.alpha
    # mean log prob exactly -H* makes the dual gradient vanish
    temp.update(np.full(64, -temp.target_entropy))
    assert temp.alpha == pytest.approx(before, abs=1e-12)


def test_temperature_rises_when_entropy_below_target():
    temp = EntropyTemp(action_dim=1, init=0.1)
    before = temp.alpha
    # entropy -mean(lp) = -1 < target -1 + something: lp high => low entropy
    temp.update(np.full(64, 5.0))
    assert temp.alpha > before


def test_temperature_falls_when_entropy_above_target():
    temp = EntropyTemp(action_dim=1, init=0.1)
    before = temp.alpha
    temp.update(np.full(64, -5.0))
    assert temp.alpha < before


def test_temperature_stays_positive():
    temp = EntropyTemp(action_dim=1, init=0.1)
    for i in range(10_000):
        temp.update(np.full(4, 1e6 if i % 2 else -1e6))
        assert temp.alpha > 0.0 and np.isfinite(temp.alpha)


# -- Q bounds -----------------------------------------------------------------


def test_qbounds_unit_rewards_give_two_hundred():
    bounds = QBounds(gamma=0.995)
    bounds.update(np.ones(1000))
    assert bounds.q_low == pytest.approx(200.0, abs=1e-9)
    assert bounds.q_high == pytest.approx(200.0, abs=1e-9)


def test_qbounds_first_call_sets_directly():
    bounds = QBounds(gamma=0.5, eta=0.95)
    rewards = np.linspace(0.0, 1.0, 101)
    bounds.update(rewards)
    r_low, r_high = np.percentile(rewards, [1.0, 99.0])
    assert bounds.q_low == pytest.approx(r_low / 0.5)
    assert bounds.q_high == pytest.approx(r_high / 0.5)


def test_qbounds_ema_convention():
    bounds = QBounds(gamma=0.995, eta=0.9)
    bounds.update(np.ones(100))  # sets q_high = 200
    bounds.update(np.full(100, 0.5))  # fresh estimate 100
    assert bounds.q_high == pytest.approx(0.9 * 200.0 + 0.1 * 100.0, abs=1e-9)
    assert bounds.q_low == pytest.approx(190.0, abs=1e-9)


def test_qbounds_empty_update_is_noop():
    bounds = QBounds(gamma=0.995)
    bounds.update(np.array([]))
    assert not bounds.initialized
    bounds.update(np.ones(10))
    q = bounds.q_high
    bounds.update(np.array([]))
    assert bounds.q_high == q


def test_qbounds_percentiles_ignore_outliers():
    rng = np.random.default_rng(27)
    rewards = rng.uniform(-1.0, 1.0, 10_000)
    rewards[:5] = 1e6
    rewards[5:10] = -1e6
    bounds = QBounds(gamma=0.5)
    bounds.update(rewards)
    assert abs(bounds.q_high) < 3.0  # ~0.98/0.5, nowhere near 2e6
    assert abs(bounds.q_low) < 3.0


def test_qbounds_ordering_invariant():
    rng = np.random.default_rng(28)
    bounds = QBounds(gamma=0.9)
    for _ in range(20):
        bounds.update(rng.standard_normal(500))
        assert bounds.q_low <= bounds.q_high


# -- soft value ---------------------------------------------------------------


def test_soft_value_alpha_zero_is_mean_q():
    policy = make_policy(seed=29)
    crit = make_critics(seed=30)
    rng = np.random.default_rng(31)
    states = rng.standard_normal((16, 3))
    rng_a = np.random.default_rng(32)
    rng_b = np.random.default_rng(32)
    v = soft_value_np(policy, crit, 0.0, states, rng_a)
    actions, _ = policy.sample_np(states, rng_b)
    assert np.allclose(v, crit.forward_np(states, actions).mean(axis=0), atol=1e-12)


def test_soft_value_identical_members():
    crit = constant_critic_members([1.5, 1.5, 1.5])
    policy = make_policy(seed=33)
    rng = np.random.default_rng(34)
    states = rng.standard_normal((8, 3))
    rng_a = np.random.default_rng(35)
    rng_b = np.random.default_rng(35)
    v = soft_value_np(policy, crit, 0.5, states, rng_a)
    _, lp = policy.sample_np(states, rng_b)
    assert np.allclose(v, 1.5 - 0.5 * lp, atol=1e-12)


def test_soft_value_matches_quadrature():
    # Gauss-Hermite oracle for E_eps[Qmean(s, a(eps)) - alpha * log pi]
    policy = make_policy(state_dim=2, action_dim=1, seed=36)
    crit = make_critics(state_dim=2, action_dim=1, seed=37)
    alpha = 0.2
    state = np.array([[0.3, -0.7]])

    nodes, weights = np.polynomial.hermite_e.hermegauss(151)
    states_rep = np.repeat(state, len(nodes), axis=0)
    actions, log_probs = policy.sample_with_eps_np(states_rep, nodes[:, None])
    q = crit.forward_np(states_rep, actions).mean(axis=0)
    oracle = float(np.sum(weights * (q - alpha * log_probs)) / np.sqrt(2.0 * np.pi))

    n = 20_000
    rng = np.random.default_rng(38)
    draws = soft_value_np(policy, crit, alpha, np.repeat(state, n, axis=0), rng)
    sem = draws.std(ddof=1) / np.sqrt(n)
    assert abs(draws.mean() - oracle) < 4.0 * sem
