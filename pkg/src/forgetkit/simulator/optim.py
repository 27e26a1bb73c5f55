from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(round(warmup_ratio * total_steps, 9))


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Learning rate for the 1-based update ``step``: linear ramp to ``peak_lr``, then constant."""
    w = warmup_steps(total_steps, warmup_ratio)
    if w == 0 or step >= w:
        return peak_lr
    return peak_lr * step / w


@dataclass
class AdamW:
    """Adam with decoupled weight decay, operating in place on a dict of arrays."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * self.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
