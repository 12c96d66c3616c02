"""AdamW with decoupled, per-parameter weight decay.

With decay 0 this is plain Adam; the decay coefficients come from the
ParameterSet so each layer can carry its own regularization strength.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t, _ in params.items()}
        self._v = {n: np.zeros_like(t.data) for n, t, _ in params.items()}

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, tensor, decay in self.params.items():
            g = tensor.grad
            if g is None:
                raise RuntimeError(f"parameter {name} has no gradient")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if decay:
                tensor.data = tensor.data * (1.0 - self.lr * decay) - self.lr * update
            else:
                tensor.data = tensor.data - self.lr * update

    def state_arrays(self):
        out = {"t": np.array([float(self.t)])}
        for name in self.params.names():
            out[f"m/{name}"] = self._m[name].copy()
            out[f"v/{name}"] = self._v[name].copy()
        return out

    def load_state_arrays(self, arrays, prefix=""):
        self.t = int(arrays[prefix + "t"][0])
        for name in self.params.names():
            self._m[name] = arrays[prefix + f"m/{name}"].copy()
            self._v[name] = arrays[prefix + f"v/{name}"].copy()
