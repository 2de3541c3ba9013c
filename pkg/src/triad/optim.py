from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with linear warmup and global-norm gradient clipping.

    Parameters whose ``grad`` is ``None`` (e.g. frozen ones) are skipped and
    keep their moment estimates.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.98),
                 eps: float = 1e-8, warmup: int = 0, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup = warmup
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (self.t + 1) / self.warmup)

    def step(self) -> float:
        """Apply one update; returns the (pre-clip) gradient norm."""
        live = [(i, p) for i, p in enumerate(self.params) if p.grad is not None]
        norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for _, p in live)))
        scale = 1.0
        if self.clip and norm > self.clip:
            scale = self.clip / norm
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in live:
            g = p.grad * scale if scale != 1.0 else p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            step = (lr / c1) * self.m[i] / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)
        return norm
