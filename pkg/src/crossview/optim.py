"""Adam with cosine-annealed learning rate."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .params import ParameterStore


class CosineSchedule:
    """lr(t) = min_lr + (base - min_lr) * (1 + cos(pi * t / total)) / 2."""

    def __init__(self, base_lr: float, total_steps: int, min_lr: float = 0.0):
        if total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.total_steps = total_steps

    def __call__(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Bias-corrected Adam over a store's trainable parameters (single writer)."""

    def __init__(self, store: ParameterStore, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0
        self._params = store.trainable_items()
        self._m = {name: np.zeros_like(p.data) for name, p in self._params}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params}

    def zero_grads(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.steps
        bc2 = 1.0 - b2 ** self.steps
        for name, p in self._params:
            g = p.grad if p.grad is not None else 0.0
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.store.version += 1

    def state_dict(self) -> dict:
        return {
            "steps": self.steps,
            "m": {n: a.copy() for n, a in self._m.items()},
            "v": {n: a.copy() for n, a in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.steps = int(state["steps"])
        for name in self._m:
            self._m[name][...] = state["m"][name]
            self._v[name][...] = state["v"][name]
