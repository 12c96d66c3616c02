"""Bootstrap ensemble of probabilistic dynamics+reward networks.

Each of the M members maps a normalized (state, action) pair to the mean of a
diagonal Gaussian over [normalized next-state displacement, normalized reward]
(output dimension S+1). Noise is homoscedastic: one learned log-sigma vector
per member, clamped to [-10, 4] by projection after every optimizer step.

Training minimizes a weighted negative log-likelihood where the per (member,
sample) weights are drawn once per fit from Exp(1), which emulates independent
bootstrap resamples. Early stopping compares the validation score distribution
of the moment-matched ensemble against the best epoch so far with a one-sided
pooled-variance Z-test; patience is ceil(b * ln(state_dim)) epochs, and the
best epoch's parameters are restored at the end.

Rollout queries use TS-1: a uniformly random member per input per call, full
output vector sampled from that member's Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm as _normal

from .autodiff import tensor as T
from .autodiff.nn import EnsembleLinear, LayerNorm, ParameterSet, silu_np
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape, Tensor

LOG_SIGMA_BOUNDS = (-10.0, 4.0)


class EnsembleGaussianModel:
    def __init__(
        self,
        state_dim,
        action_dim,
        members=8,
        hidden=256,
        rng=None,
        dropout_rates=(0.0075, 0.005, 0.0025),
        decays=(0.00025, 0.0005, 0.00075, 0.001),
    ):
        rng = rng if rng is not None else np.random.default_rng()
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.members = int(members)
        self.hidden = int(hidden)
        self.out_dim = self.state_dim + 1
        self.dropout_rates = tuple(dropout_rates)
        in_dim = self.state_dim + self.action_dim

        self.lin1 = EnsembleLinear(members, in_dim, hidden, rng, decay=decays[0], name="l1")
        self.ln1 = LayerNorm(hidden, name="ln1")
        self.lin2 = EnsembleLinear(members, hidden, hidden, rng, decay=decays[1], name="l2")
        self.ln2 = LayerNorm(hidden, name="ln2")
        self.lin3 = EnsembleLinear(members, hidden, hidden, rng, decay=decays[2], name="l3")
        self.ln3 = LayerNorm(hidden, name="ln3")
        self.head = EnsembleLinear(members, hidden, self.out_dim, rng, decay=decays[3], name="head")
        self.log_sigma = Tensor(
            np.zeros((members, self.out_dim), dtype=T.default_dtype()), requires_grad=True
        )

        self.params = ParameterSet()
        for layer in (self.lin1, self.ln1, self.lin2, self.ln2, self.lin3, self.ln3, self.head):
            layer.register(self.params)
        self.params.add("log_sigma", self.log_sigma)

    def _blocks(self):
        return (
            (self.lin1, self.dropout_rates[0], self.ln1),
            (self.lin2, self.dropout_rates[1], self.ln2),
            (self.lin3, self.dropout_rates[2], self.ln3),
        )

    def forward_train(self, x, rng):
        """Tape forward with dropout over all members; x is (N, S+A) data."""
        h = Tensor(np.ascontiguousarray(np.broadcast_to(x, (self.members,) + x.shape)))
        for lin, rate, ln in self._blocks():
            h = ln(T.silu(T.dropout(lin(h), rate, rng, training=True)))
        return self.head(h)

    def forward_eval(self, x_tensor):
        """Tape forward without dropout; x_tensor is (M, N, S+A)."""
        h = x_tensor
        for lin, _, ln in self._blocks():
            h = ln(T.silu(lin(h)))
        return self.head(h)

    def forward_np(self, x):
        """Plain-numpy eval forward for all members; x is (N, S+A) -> (M, N, S+1)."""
        h = self.lin1.forward_np(x)
        h = self.ln1.forward_np(silu_np(h))
        h = self.lin2.forward_np(h)
        h = self.ln2.forward_np(silu_np(h))
        h = self.lin3.forward_np(h)
        h = self.ln3.forward_np(silu_np(h))
        return self.head.forward_np(h)

    def member_mean(self, x_tensor, member_idx, groups=None):
        """Tape forward routing row n through member member_idx[n]."""
        if groups is None:
            groups = T.member_groups(member_idx, self.members)
        h = x_tensor
        for lin, _, ln in self._blocks():
            h = ln(T.silu(lin.indexed(h, member_idx, groups)))
        return self.head.indexed(h, member_idx, groups)

    def member_mean_np(self, x, member_idx, groups=None):
        if groups is None:
            groups = T.member_groups(member_idx, self.members)
        h = x
        for lin, _, ln in self._blocks():
            h = ln.forward_np(silu_np(lin.indexed_np(h, member_idx, groups)))
        return self.head.indexed_np(h, member_idx, groups)

    def sigma_np(self):
        return np.exp(self.log_sigma.data)

    def sigma_rows(self, member_idx):
        return T.exp(T.select_rows(self.log_sigma, member_idx))

    def clamp_log_sigma(self):
        np.clip(self.log_sigma.data, LOG_SIGMA_BOUNDS[0], LOG_SIGMA_BOUNDS[1], out=self.log_sigma.data)


def nll_loss(mu, log_sigma, targets, weights):
    """Weighted Gaussian negative log-likelihood, averaged by 1/(M*N*D).

    mu: Tensor (M, N, D); log_sigma: Tensor (M, D); targets: array (N, D);
    weights: array (M, N). Per element the loss is log sigma + 0.5 z^2 with
    z the sigma-scaled residual; weights multiply each (member, sample) term.
    """
    members, n, dims = mu.data.shape
    ls3 = T.reshape(log_sigma, (members, 1, dims))
    z = T.mul(T.sub(Tensor(np.asarray(targets)), mu), T.exp(T.neg(ls3)))
    per = T.add(ls3, T.mul(Tensor(np.asarray(0.5)), T.square(z)))
    weighted = T.mul(Tensor(np.asarray(weights)[:, :, None]), per)
    return T.mul(T.sum_(weighted), Tensor(np.asarray(1.0 / (members * n * dims))))


def validation_scores(member_means, member_sigmas, targets):
    """Per-datum score of the moment-matched ensemble Gaussian.

    member_means: (M, N, D); member_sigmas: (M, D); targets: (N, D).
    The ensemble mean is the average of member means; the ensemble variance is
    the sample variance of member means (divisor M-1) plus the average member
    variance.
    """
    members = member_means.shape[0]
    mu_tilde = member_means.mean(axis=0)
    if members > 1:
        spread = member_means.var(axis=0, ddof=1)
    else:
        spread = np.zeros_like(mu_tilde)
    var_tilde = spread + (member_sigmas**2).mean(axis=0)
    return 0.5 * np.sum((mu_tilde - targets) ** 2 / var_tilde + np.log(var_tilde), axis=1)


def bootstrap_weights(rng, members, n):
    """One Exp(1) weight per (member, sample), drawn once and then fixed."""
    return rng.exponential(1.0, (members, n))


def build_model_inputs(stats, states, actions, rewards, next_states):
    """Normalized (state, action) inputs and [displacement, reward] targets."""
    dtype = T.default_dtype()
    x = np.concatenate([stats.normalize_states(states), actions], axis=1).astype(dtype)
    deltas = np.asarray(next_states) - np.asarray(states)
    targets = np.concatenate(
        [stats.normalize_deltas(deltas), stats.normalize_rewards(np.asarray(rewards)).reshape(-1, 1)],
        axis=1,
    ).astype(dtype)
    return x, targets


def _significant_improvement(best_scores, new_scores, z_crit):
    """One-sided pooled-variance Z-test: is the new mean score lower?"""
    if not np.all(np.isfinite(new_scores)):
        return False
    n1, n2 = best_scores.size, new_scores.size
    m1, m2 = best_scores.mean(), new_scores.mean()
    v1 = best_scores.var(ddof=1) if n1 > 1 else 0.0
    v2 = new_scores.var(ddof=1) if n2 > 1 else 0.0
    if n1 + n2 > 2:
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2)
    else:
        pooled = 0.0
    denom = math.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    if denom == 0.0:
        return m2 < m1
    return (m1 - m2) / denom > z_crit


@dataclass
class FitReport:
    epochs_run: int
    best_epoch: int
    patience: int
    stopped_early: bool
    n_train: int
    n_val: int
    train_nll: list = field(default_factory=list)
    val_score_means: list = field(default_factory=list)


def fit(
    model,
    buffer,
    stats,
    rng,
    *,
    lr=1e-3,
    batch_size=256,
    holdout_frac=0.2,
    patience_base=5,
    max_epochs=1000,
    significance=0.1,
):
    """Train the ensemble on the buffer contents with Z-test early stopping."""
    states, actions, rewards, next_states, _ = buffer.all_columns()
    x, targets = build_model_inputs(stats, states, actions, rewards, next_states)
    n = x.shape[0]
    n_val = int(round(holdout_frac * n))
    if n_val < 1 or n - n_val < 1:
        raise ValueError(f"dataset of {n} samples cannot support a {holdout_frac:.0%} validation split")
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, t_train = x[train_idx], targets[train_idx]
    x_val, t_val = x[val_idx], targets[val_idx]
    n_train = x_train.shape[0]

    weights = bootstrap_weights(rng, model.members, n_train)
    opt = AdamW(model.params, lr=lr)
    z_crit = float(_normal.ppf(1.0 - significance))
    patience = max(1, math.ceil(patience_base * math.log(model.state_dim)))

    def val_scores():
        return validation_scores(model.forward_np(x_val), model.sigma_np(), t_val)

    best_scores = val_scores()
    best_params = model.params.to_arrays()
    best_epoch = 0
    report = FitReport(
        epochs_run=0,
        best_epoch=0,
        patience=patience,
        stopped_early=False,
        n_train=n_train,
        n_val=n_val,
        val_score_means=[float(best_scores.mean())],
    )

    since_improvement = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train, batch_size):
            sel = order[start : start + batch_size]
            model.params.zero_grad()
            with Tape() as tape:
                mu = model.forward_train(x_train[sel], rng)
                loss = nll_loss(mu, model.log_sigma, t_train[sel], weights[:, sel])
            tape.backward(loss)
            opt.step()
            model.clamp_log_sigma()
            epoch_losses.append(float(loss.data))
        report.train_nll.append(float(np.mean(epoch_losses)))
        report.epochs_run = epoch

        scores = val_scores()
        report.val_score_means.append(float(scores.mean()))
        if _significant_improvement(best_scores, scores, z_crit):
            best_scores = scores
            best_params = model.params.to_arrays()
            best_epoch = epoch
            since_improvement = 0
        else:
            since_improvement += 1
        if since_improvement >= patience:
            report.stopped_early = True
            break

    model.params.load_arrays(best_params)
    report.best_epoch = best_epoch
    return report


def ts1_predict(model, norm_states, actions, stats, rng):
    """One model step: uniform member per row, full vector sampled.

    Inputs are normalized states and raw actions. Returns (next normalized
    states, denormalized rewards, finite-row mask). RNG draw order is fixed:
    member indices first, then one standard normal per output element.
    """
    n = norm_states.shape[0]
    x = np.concatenate([norm_states, actions], axis=1)
    member_idx = rng.integers(0, model.members, n)
    mu = model.member_mean_np(x, member_idx)
    sigma = model.sigma_np()[member_idx]
    sample = mu + sigma * rng.standard_normal(mu.shape)
    next_norm = stats.normalized_successor(norm_states, sample[:, : model.state_dim])
    rewards = stats.denormalize_rewards(sample[:, model.state_dim])
    ok = np.all(np.isfinite(next_norm), axis=1) & np.isfinite(rewards)
    return next_norm, rewards, ok


def offline_rmse(model, stats, splits):
    """RMSE of the moment-matched mean prediction on raw-scale targets.

    splits maps split name to (states, actions, rewards, next_states).
    Errors cover the S displacement dimensions and the reward jointly.
    """
    out = {}
    for name, (states, actions, rewards, next_states) in splits.items():
        x = np.concatenate([stats.normalize_states(states), actions], axis=1)
        mu = model.forward_np(x).mean(axis=0)
        pred_delta = stats.delta_mean + stats.delta_std * mu[:, : model.state_dim]
        pred_reward = stats.denormalize_rewards(mu[:, model.state_dim])
        err = np.concatenate(
            [pred_delta - (np.asarray(next_states) - np.asarray(states)),
             (pred_reward - np.asarray(rewards))[:, None]],
            axis=1,
        )
        out[name] = float(np.sqrt(np.mean(err**2)))
    return out
