"""Adam with decoupled weight decay and the linear warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from vrdu.autodiff import Parameter


def lr_schedule(step: int, total: int, peak_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup from 0 to peak over warmup_frac * total steps, then
    linear decay back to 0 at step == total."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    warmup = warmup_frac * total
    step = min(step, total)
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    if total == warmup:
        return 0.0
    return peak_lr * (total - step) / (total - warmup)


class Adam:
    """Standard Adam; weight decay is decoupled (applied to the value, not
    folded into the gradient)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr < 0 or eps <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update
