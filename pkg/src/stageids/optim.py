"""Adam with optional global-norm gradient clipping, shared by the GCN and RNN."""

from typing import List

import numpy as np


class Adam:
    def __init__(self, params: List[np.ndarray], step_size=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=None):
        self.params = params
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        """Update ``self.params`` in place."""
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.step_size * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)
