"""Optimizers that update leaf tensors in place through ``Tensor.assign``."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum: v <- m v + g;  w <- w - lr v."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = self.momentum * self.velocity[k] + grads[k]
            self.velocity[k] = v
            p.assign(p.data - self.lr * v)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.assign(p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
