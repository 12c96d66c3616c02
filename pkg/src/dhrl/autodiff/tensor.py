"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations executed inside a ``with Tape():`` block are recorded in creation
order; ``Tape.backward(loss)`` replays that record in reverse, which is a valid
reverse topological order because every input exists before its output.
Outside a tape, the same functions run as plain forward computations and build
no graph, which keeps gradient-free rollouts cheap.

Design constraints honoured here:
  * first-order gradients only, dense float32/float64 arrays;
  * a tape is consumed exactly once, a second backward raises;
  * gradient accumulation is additive across tapes (`grad +=`);
  * given identical inputs/seeds, forwards and dropout masks are bitwise
    reproducible.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit as _sigmoid_np

sigmoid_np = _sigmoid_np

_DTYPE = np.float64
_TLS = threading.local()


def set_default_dtype(dtype):
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations; confined to one thread."""

    __slots__ = ("_nodes", "consumed")

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)


def _make(data, parents, vjp):
    """Wrap an op result; record it when a tape is active and grads are needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        tape._nodes.append(out)
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.dtype != t.data.dtype else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def vjp(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def vjp(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def vjp(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    inv = 1.0 / b.data
    data = a.data * inv

    def vjp(g):
        _acc(a, _unbroadcast(g * inv, a.data.shape))
        _acc(b, _unbroadcast(-g * data * inv, b.data.shape))

    return _make(data, (a, b), vjp)


def neg(a):
    data = -a.data

    def vjp(g):
        _acc(a, -g)

    return _make(data, (a,), vjp)


def pow_scalar(a, p):
    p = float(p)
    data = a.data**p

    def vjp(g):
        _acc(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), vjp)


def square(a):
    data = a.data * a.data

    def vjp(g):
        _acc(a, g * (2.0 * a.data))

    return _make(data, (a,), vjp)


def exp(a):
    data = np.exp(a.data)

    def vjp(g):
        _acc(a, g * data)

    return _make(data, (a,), vjp)


def log(a):
    data = np.log(a.data)

    def vjp(g):
        _acc(a, g / a.data)

    return _make(data, (a,), vjp)


def sqrt(a):
    data = np.sqrt(a.data)

    def vjp(g):
        _acc(a, g * (0.5 / data))

    return _make(data, (a,), vjp)


def tanh(a):
    data = np.tanh(a.data)

    def vjp(g):
        _acc(a, g * (1.0 - data * data))

    return _make(data, (a,), vjp)


def sigmoid(a):
    data = _sigmoid_np(a.data)

    def vjp(g):
        _acc(a, g * data * (1.0 - data))

    return _make(data, (a,), vjp)


def silu(a):
    s = _sigmoid_np(a.data)
    data = a.data * s

    def vjp(g):
        _acc(a, g * (s + data * (1.0 - s)))

    return _make(data, (a,), vjp)


def softplus(a):
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)

    def vjp(g):
        _acc(a, g * s)

    return _make(data, (a,), vjp)


def clip(a, lo, hi):
    lo, hi = float(lo), float(hi)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        _acc(a, g * inside)

    return _make(data, (a,), vjp)


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ValueError("minimum requires equal shapes")
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def vjp(g):
        _acc(a, g * take_a)
        _acc(b, g * ~take_a)

    return _make(data, (a, b), vjp)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        _acc(a, np.broadcast_to(gg / count, a.data.shape))

    return _make(data, (a,), vjp)


# ---------------------------------------------------------------- structure


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if not (a.data.ndim == b.data.ndim and a.data.ndim in (2, 3)):
        raise ValueError("matmul supports 2D@2D or 3D@3D with matching leading dim")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        _acc(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _acc(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(data, (a, b), vjp)


def linear(x, w, b):
    """Fused x @ w + b for 2-D x."""
    data = x.data @ w.data + b.data

    def vjp(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return _make(data, (x, w, b), vjp)


def ensemble_linear(x, w, b):
    """Per-member linear map: (M,B,i) @ (M,i,o) + (M,o) -> (M,B,o)."""
    data = np.matmul(x.data, w.data) + b.data[:, None, :]

    def vjp(g):
        _acc(x, np.matmul(g, w.data.swapaxes(-1, -2)))
        _acc(w, np.matmul(x.data.swapaxes(-1, -2), g))
        _acc(b, g.sum(axis=1))

    return _make(data, (x, w, b), vjp)


def member_groups(member_idx, members):
    """Group row indices by ensemble member; shared across a rollout step."""
    idx = np.asarray(member_idx)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    bounds = np.searchsorted(sorted_idx, np.arange(members + 1))
    return [
        (m, order[bounds[m] : bounds[m + 1]])
        for m in range(members)
        if bounds[m + 1] > bounds[m]
    ]


def indexed_linear(x, w, b, member_idx, groups=None):
    """Per-sample member selection: out[n] = x[n] @ w[idx[n]] + b[idx[n]].

    Work equals a single-member pass; used by TS-1 rollouts where each input
    is routed to one uniformly drawn ensemble member. `groups` lets one
    member assignment be reused across the layers of a step.
    """
    if groups is None:
        groups = member_groups(member_idx, w.data.shape[0])
    B = x.data.shape[0]
    out = np.empty((B, w.data.shape[2]), dtype=x.data.dtype)
    for m, rows in groups:
        out[rows] = x.data[rows] @ w.data[m] + b.data[m]

    def vjp(g):
        if x.requires_grad:
            dx = np.empty_like(x.data)
            for m, rows in groups:
                dx[rows] = g[rows] @ w.data[m].T
            _acc(x, dx)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for m, rows in groups:
                dw[m] = x.data[rows].T @ g[rows]
            _acc(w, dw)
        if b.requires_grad:
            db = np.zeros_like(b.data)
            for m, rows in groups:
                db[m] = g[rows].sum(axis=0)
            _acc(b, db)

    return _make(out, (x, w, b), vjp)


def expand_members(x, members):
    """Broadcast (B,i) to (M,B,i) so one batch feeds every ensemble member."""
    data = np.broadcast_to(x.data, (members,) + x.data.shape)

    def vjp(g):
        _acc(x, g.sum(axis=0))

    return _make(data, (x,), vjp)


def select_rows(x, idx):
    idx = np.asarray(idx)
    data = x.data[idx]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _acc(x, dx)

    return _make(data, (x,), vjp)


def mask_rows(x, keep):
    """Zero out rows where keep is False; gradients for those rows are dropped.

    Unlike multiplying by a 0/1 mask, the forward uses where(), so non-finite
    values in dead rows are replaced rather than propagated as 0*inf.
    """
    keep = np.asarray(keep, dtype=bool)
    sel = keep.reshape(keep.shape + (1,) * (x.data.ndim - keep.ndim))
    data = np.where(sel, x.data, 0.0)

    def vjp(g):
        _acc(x, np.where(sel, g, 0.0))

    return _make(data, (x,), vjp)


def concat_last(parts):
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]

    def vjp(g):
        start = 0
        for p, s in zip(parts, sizes):
            _acc(p, g[..., start : start + s])
            start += s

    return _make(data, tuple(parts), vjp)


def slice_last(a, start, stop):
    data = a.data[..., start:stop]

    def vjp(g):
        da = np.zeros_like(a.data)
        da[..., start:stop] = g
        _acc(a, da)

    return _make(data, (a,), vjp)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def vjp(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(data, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Population variance; a constant row degenerates to zeros via eps.
    """
    n = x.data.shape[-1]
    inv_n = 1.0 / n
    mu = x.data.sum(axis=-1, keepdims=True) * inv_n
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.sum(axis=-1, keepdims=True) * inv_n
            m2 = (gx * xhat).sum(axis=-1, keepdims=True) * inv_n
            _acc(x, (gx - m1 - xhat * m2) * inv)
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            _acc(gain, (g * xhat).sum(axis=red))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            _acc(bias, g.sum(axis=red))

    return _make(data, (x, gain, bias), vjp)


def dropout(x, p, rng, training):
    """Inverted dropout: kept activations are scaled by 1/(1-p)."""
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or p == 0.0:
        def vjp_id(g):
            _acc(x, g)

        return _make(x.data, (x,), vjp_id)
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * mask

    def vjp(g):
        _acc(x, g * mask)

    return _make(data, (x,), vjp)
