"""Adam and gradient utilities."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Parameter


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


def grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam with bias correction. Per-parameter moments live in ``self.state``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = [
            {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0}
            for p in self.params
        ]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    for p, s in zip(params, state):
        if p.grad is None:
            continue
        g = p.grad
        s["step"] += 1
        t = s["step"]
        s["m"] = beta1 * s["m"] + (1.0 - beta1) * g
        s["v"] = beta2 * s["v"] + (1.0 - beta2) * (g * g)
        m_hat = s["m"] / (1.0 - beta1 ** t)
        v_hat = s["v"] / (1.0 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
