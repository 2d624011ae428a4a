"""Decoupled-weight-decay adaptive-moment optimizer and the cosine learning
rate schedule with linear warm-up used by the training harness."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """

    def __init__(self, params, lr: float = 2.5e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def warmup_cosine_lr(base_lr: float, epoch: int, total_epochs: int,
                     warmup_epochs: int = 5) -> float:
    """Linear warm-up over the first epochs, cosine decay afterwards."""
    if total_epochs <= 0:
        return base_lr
    warmup = min(warmup_epochs, total_epochs)
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    span = max(total_epochs - warmup, 1)
    progress = (epoch - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
