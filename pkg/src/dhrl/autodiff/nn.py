"""Parameter bookkeeping and the layer types shared by every network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParameterSet:
    """Ordered named parameters with a per-tensor weight-decay coefficient."""

    def __init__(self):
        self._params = {}
        self._decay = {}

    def add(self, name, tensor, decay=0.0):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._decay[name] = float(decay)
        return tensor

    def merge(self, prefix, other):
        for name, t in other._params.items():
            self.add(f"{prefix}/{name}", t, other._decay[name])

    def items(self):
        return [(n, t, self._decay[n]) for n, t in self._params.items()]

    def tensors(self):
        return list(self._params.values())

    def names(self):
        return list(self._params.keys())

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def to_arrays(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays, prefix=""):
        for n, t in self._params.items():
            src = arrays[prefix + n]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n}: {src.shape} vs {t.data.shape}")
            t.data = np.asarray(src, dtype=t.data.dtype).copy()

    def grad_norm(self):
        sq = 0.0
        for t in self._params.values():
            if t.grad is not None:
                sq += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(sq))

    def scale_grads(self, factor):
        for t in self._params.values():
            if t.grad is not None:
                t.grad = t.grad * factor

    def total_size(self):
        return sum(t.data.size for t in self._params.values())

    def flat_grad(self):
        parts = [
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
            for t in self._params.values()
        ]
        return np.concatenate(parts)


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, shape).astype(T.default_dtype())


def silu_np(x):
    return x * T.sigmoid_np(x)


def layer_norm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return (centered / np.sqrt(var + eps)) * gain + bias


class Linear:
    def __init__(self, in_dim, out_dim, rng, decay=0.0, name="linear"):
        self.w = Tensor(_fan_in_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.b = Tensor(_fan_in_uniform(rng, (out_dim,), in_dim), requires_grad=True)
        self.name = name
        self.decay = decay

    def register(self, ps: ParameterSet):
        ps.add(f"{self.name}/w", self.w, self.decay)
        ps.add(f"{self.name}/b", self.b, self.decay)

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def forward_np(self, x):
        return x @ self.w.data + self.b.data


class EnsembleLinear:
    """M independent linear maps evaluated in one batched matmul."""

    def __init__(self, members, in_dim, out_dim, rng, decay=0.0, name="elinear"):
        self.w = Tensor(
            _fan_in_uniform(rng, (members, in_dim, out_dim), in_dim), requires_grad=True
        )
        self.b = Tensor(_fan_in_uniform(rng, (members, out_dim), in_dim), requires_grad=True)
        self.members = members
        self.name = name
        self.decay = decay

    def register(self, ps: ParameterSet):
        ps.add(f"{self.name}/w", self.w, self.decay)
        ps.add(f"{self.name}/b", self.b, self.decay)

    def __call__(self, x):
        return T.ensemble_linear(x, self.w, self.b)

    def forward_np(self, x):
        return np.matmul(x, self.w.data) + self.b.data[:, None, :]

    def indexed(self, x, member_idx, groups=None):
        return T.indexed_linear(x, self.w, self.b, member_idx, groups)

    def indexed_np(self, x, member_idx, groups=None):
        if groups is None:
            groups = T.member_groups(member_idx, self.members)
        out = np.empty((x.shape[0], self.w.data.shape[2]), dtype=x.dtype)
        for m, rows in groups:
            out[rows] = x[rows] @ self.w.data[m] + self.b.data[m]
        return out


class LayerNorm:
    def __init__(self, dim, name="ln", eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=T.default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=T.default_dtype()), requires_grad=True)
        self.eps = eps
        self.name = name

    def register(self, ps: ParameterSet):
        ps.add(f"{self.name}/gain", self.gain)
        ps.add(f"{self.name}/bias", self.bias)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def forward_np(self, x):
        return layer_norm_np(x, self.gain.data, self.bias.data, self.eps)
