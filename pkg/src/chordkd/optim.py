"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .nn import Parameters

__all__ = ["AdamW"]


class AdamW:
    def __init__(self, params: Parameters, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01) -> None:
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.values.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.values.items()}

    def step(self, lr: float) -> None:
        """Apply one update from the accumulated gradients."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, value in self.params.values.items():
            grad = self.params.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            value -= lr * update + lr * self.weight_decay * value
