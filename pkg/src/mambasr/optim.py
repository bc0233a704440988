"""Adam with cosine learning-rate decay over a flat parameter dict."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def cosine_lr(step: int, total: int, base_lr: float, min_ratio: float = 0.0) -> float:
    """Learning rate for 0-based ``step``; decays from ``base_lr`` to ``min_ratio*base_lr``."""
    if total <= 1:
        return base_lr
    frac = min(max(step, 0), total - 1) / (total - 1)
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class Adam:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    min_lr_ratio: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.lr, self.min_lr_ratio)

    def step(self, params: dict) -> float:
        """Apply one update from ``p.grad`` of every tensor in ``params``; returns the lr used."""
        lr = self.current_lr()
        t = self.step_count + 1
        c1, c2 = 1.0 - self.beta1 ** t, 1.0 - self.beta2 ** t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t
        return lr

    @staticmethod
    def zero_grad(params: dict) -> None:
        for p in params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Moments keyed ``m.<name>`` / ``v.<name>`` for checkpointing."""
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, step_count: int) -> None:
        self.m = {k[2:]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("v.")}
        self.step_count = int(step_count)
