"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .nd import Tensor


class Adam:
    """Adaptive first/second-moment updates with bias correction.

    Parameters whose names are not in `trainable` keep their values and
    their moment state untouched, so frozen groups stay bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 trainable: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.trainable = set(params) if trainable is None else set(trainable)
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items() if k in self.trainable}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items() if k in self.trainable}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in self.trainable:
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
