"""Adam with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class AdamW:
    """Steps only parameters that require grad and hold a gradient.

    Moment estimates and step counts are kept per parameter, so a group
    unfrozen mid-run starts its bias correction from step one.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            t = self._t.get(i, 0) + 1
            m = self.beta1 * self._m.get(i, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(i, 0.0) + (1 - self.beta2) * g * g
            self._t[i], self._m[i], self._v[i] = t, m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
