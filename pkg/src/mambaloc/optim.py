"""Adam with decoupled weight decay, and a plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np


def decays(name: str, tensor) -> bool:
    """Weight decay applies to matrices and conv kernels only; biases, norm
    affines, and the state-space timescale/skip parameters stay undecayed."""
    return tensor.ndim >= 2 and not name.endswith("A_log")


class AdamW:
    """First/second-moment adaptive steps plus decoupled decay.

    ``params`` is a list of (name, Tensor) pairs; tensors are updated in
    place from their ``grad`` fields.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0.0 or eps <= 0.0 or weight_decay < 0.0:
            raise ValueError("AdamW: lr and weight_decay must be >= 0, eps > 0")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"AdamW: betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and decays(name, p):
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without
    improvement of a maximized metric, never dropping below ``min_lr``."""

    def __init__(self, optimizer: AdamW, factor: float = 0.5, patience: int = 3,
                 min_lr: float = 1e-6):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"PlateauScheduler: factor must lie in (0, 1), got {factor}")
        if patience < 1:
            raise ValueError(f"PlateauScheduler: patience must be >= 1, got {patience}")
        self.optimizer = optimizer
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_lr = float(min_lr)
        self.best = -np.inf
        self.wait = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when it improved."""
        if metric > self.best:
            self.best = float(metric)
            self.wait = 0
            return True
        self.wait += 1
        if self.wait >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.wait = 0
        return False
