"""Transition storage and input/target normalization.

Two buffers: the environment replay buffer (FIFO ring, uniform sampling) and
the model buffer holding synthetic transitions from distribution rollouts
(filled in batches, cleared on every refresh). Batches carry a `source` tag
("replay" or "model") so experiments can prove where their data came from.

Dump format (all integers little-endian):

    magic     4 bytes  b"RBF1"
    version   uint32   1
    capacity  uint64
    count     uint64
    cursor    uint64
    state_dim uint32
    action_dim uint32
    payload   states (count x S f64), actions (count x A f64),
              rewards (count f64), next_states (count x S f64),
              terminated (count u8), truncated (count u8)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"RBF1"
STD_FLOOR = 1e-6


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminated: bool
    truncated: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    source: str


class _BaseBuffer:
    def __init__(self, capacity, state_dim, action_dim, source):
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.source = source
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminated = np.zeros(capacity, dtype=np.uint8)
        self.truncated = np.zeros(capacity, dtype=np.uint8)
        self._count = 0
        self._cursor = 0

    def __len__(self):
        return self._count

    def sample(self, n, rng):
        if self._count == 0:
            raise RuntimeError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._count, int(n))
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            terminated=self.terminated[idx].astype(bool),
            truncated=self.truncated[idx].astype(bool),
            source=self.source,
        )

    def all_columns(self):
        n = self._count
        return (
            self.states[:n],
            self.actions[:n],
            self.rewards[:n],
            self.next_states[:n],
            self.terminated[:n].astype(bool),
        )

    def dump(self, path):
        n = self._count
        header = _MAGIC + struct.pack(
            "<IQQQII",
            1,
            self.capacity,
            n,
            self._cursor,
            self.state_dim,
            self.action_dim,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.states[:n].astype("<f8").tobytes())
            fh.write(self.actions[:n].astype("<f8").tobytes())
            fh.write(self.rewards[:n].astype("<f8").tobytes())
            fh.write(self.next_states[:n].astype("<f8").tobytes())
            fh.write(self.terminated[:n].tobytes())
            fh.write(self.truncated[:n].tobytes())

    @classmethod
    def restore(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise ValueError("not a buffer dump (bad magic)")
        version, capacity, count, cursor, s_dim, a_dim = struct.unpack("<IQQQII", raw[4:40])
        if version != 1:
            raise ValueError(f"unsupported buffer dump version {version}")
        buf = cls(capacity, s_dim, a_dim)
        pos = 40

        def take(shape, dtype):
            nonlocal pos
            arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=pos)
            pos += arr.nbytes
            return arr.reshape(shape).copy()

        buf.states[:count] = take((count, s_dim), "<f8")
        buf.actions[:count] = take((count, a_dim), "<f8")
        buf.rewards[:count] = take((count,), "<f8")
        buf.next_states[:count] = take((count, s_dim), "<f8")
        buf.terminated[:count] = take((count,), np.uint8)
        buf.truncated[:count] = take((count,), np.uint8)
        buf._count = int(count)
        buf._cursor = int(cursor)
        return buf


class ReplayBuffer(_BaseBuffer):
    """FIFO ring buffer over environment transitions."""

    def __init__(self, capacity, state_dim, action_dim):
        super().__init__(capacity, state_dim, action_dim, source="replay")

    def push(self, tr: Transition):
        i = self._cursor
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state
        self.terminated[i] = np.uint8(tr.terminated)
        self.truncated[i] = np.uint8(tr.truncated)
        self._cursor = (i + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)


class ModelBuffer(_BaseBuffer):
    """Synthetic on-policy transitions; refilled in batches, cleared per refresh."""

    def __init__(self, capacity, state_dim, action_dim):
        super().__init__(capacity, state_dim, action_dim, source="model")

    def push_batch(self, states, actions, rewards, next_states):
        n = states.shape[0]
        if self._count + n > self.capacity:
            raise ValueError("model buffer overflow: clear before refilling")
        sl = slice(self._count, self._count + n)
        self.states[sl] = states
        self.actions[sl] = actions
        self.rewards[sl] = rewards
        self.next_states[sl] = next_states
        self._count += n
        self._cursor = self._count % self.capacity

    def clear(self):
        self._count = 0
        self._cursor = 0


class NormStats:
    """Streaming mean/std over states, state displacements, and rewards.

    Chan's parallel-combine update keeps the streaming result equal to the
    two-pass computation to ~1e-10. Standard deviations are sample (ddof=1)
    and floored at 1e-6; actions are deliberately never normalized.
    """

    def __init__(self, state_dim):
        self.state_dim = int(state_dim)
        d = self.state_dim
        self._n = {"state": 0, "delta": 0, "reward": 0}
        self._mean = {"state": np.zeros(d), "delta": np.zeros(d), "reward": np.zeros(1)}
        self._m2 = {"state": np.zeros(d), "delta": np.zeros(d), "reward": np.zeros(1)}
        self._std = {"state": np.full(d, STD_FLOOR), "delta": np.full(d, STD_FLOOR), "reward": np.full(1, STD_FLOOR)}

    def _combine(self, key, batch):
        nb = batch.shape[0]
        if nb == 0:
            return
        mb = batch.mean(axis=0)
        centered = batch - mb
        m2b = np.einsum("ij,ij->j", centered, centered)
        na = self._n[key]
        tot = na + nb
        delta = mb - self._mean[key]
        self._mean[key] = self._mean[key] + delta * (nb / tot)
        self._m2[key] = self._m2[key] + m2b + delta * delta * (na * nb / tot)
        self._n[key] = tot
        if tot > 1:
            self._std[key] = np.maximum(np.sqrt(self._m2[key] / (tot - 1)), STD_FLOOR)

    def update(self, states, deltas, rewards):
        self._combine("state", np.asarray(states))
        self._combine("delta", np.asarray(deltas))
        self._combine("reward", np.asarray(rewards).reshape(-1, 1))

    # views used throughout training
    @property
    def count(self):
        return self._n["state"]

    @property
    def state_mean(self):
        return self._mean["state"]

    @property
    def state_std(self):
        return self._std["state"]

    @property
    def delta_mean(self):
        return self._mean["delta"]

    @property
    def delta_std(self):
        return self._std["delta"]

    @property
    def reward_mean(self):
        return float(self._mean["reward"][0])

    @property
    def reward_std(self):
        return float(self._std["reward"][0])

    def normalize_states(self, s):
        return (s - self.state_mean) / self.state_std

    def denormalize_states(self, s_norm):
        return self.state_mean + self.state_std * s_norm

    def normalize_deltas(self, d):
        return (d - self.delta_mean) / self.delta_std

    def normalize_rewards(self, r):
        return (r - self.reward_mean) / self.reward_std

    def denormalize_rewards(self, r_norm):
        return self.reward_mean + self.reward_std * r_norm

    def normalized_successor(self, s_norm, delta_norm):
        """Next normalized state without leaving normalized space.

        Equals normalize(denormalize(s_norm) + denormalize_delta(delta_norm)).
        """
        return s_norm + (self.delta_mean + self.delta_std * delta_norm) / self.state_std

    def to_arrays(self):
        out = {}
        for key in ("state", "delta", "reward"):
            out[f"{key}/n"] = np.array([float(self._n[key])])
            out[f"{key}/mean"] = self._mean[key].copy()
            out[f"{key}/m2"] = self._m2[key].copy()
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        dim = arrays[prefix + "state/mean"].shape[0]
        stats = cls(dim)
        for key in ("state", "delta", "reward"):
            stats._n[key] = int(arrays[prefix + f"{key}/n"][0])
            stats._mean[key] = arrays[prefix + f"{key}/mean"].copy()
            stats._m2[key] = arrays[prefix + f"{key}/m2"].copy()
            n = stats._n[key]
            if n > 1:
                stats._std[key] = np.maximum(np.sqrt(stats._m2[key] / (n - 1)), STD_FLOOR)
        return stats
