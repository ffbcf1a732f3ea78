"""Adam with per-parameter learning rates and prunable state."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8 by default).

    lrs maps parameter name to learning rate; a plain float applies to all.
    step() accepts a multiplicative lr scale so callers can implement decay
    schedules without touching the stored rates.
    """

    def __init__(self, params: list[Parameter], lrs, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if isinstance(lrs, dict):
            missing = [p.name for p in self.params if p.name not in lrs]
            if missing:
                raise KeyError(f"no learning rate for parameters: {missing}")
            self.lrs = {p.name: float(lrs[p.name]) for p in self.params}
        else:
            self.lrs = {p.name: float(lrs) for p in self.params}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr_scale: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.value -= self.lrs[p.name] * lr_scale * mhat / (np.sqrt(vhat) + self.eps)

    def prune_rows(self, name: str, keep: np.ndarray):
        """Drop optimizer state rows along axis 0 (after pruning a parameter)."""
        self.m[name] = self.m[name][keep]
        self.v[name] = self.v[name][keep]

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for name in self.m:
            out[f"m/{name}"] = self.m[name].copy()
            out[f"v/{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for p in self.params:
            self.m[p.name] = np.array(state[f"m/{p.name}"], dtype=np.float64)
            self.v[p.name] = np.array(state[f"v/{p.name}"], dtype=np.float64)
