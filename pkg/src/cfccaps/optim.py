"""Adam optimizer with a per-epoch exponential learning-rate decay."""

from __future__ import annotations

import numpy as np


class MissingGradError(RuntimeError):
    """step() was called on a parameter whose gradient was never populated."""


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Holds first/second moment buffers per parameter plus the step
    counter; ``decay_lr()`` applies the multiplicative schedule
    lr <- lr * gamma, intended to be called once per epoch.
    """

    def __init__(self, named_params, lr=0.001, beta1=0.9, beta2=0.999,
                 eps=1e-8, decay_gamma=0.96):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0 < decay_gamma <= 1:
            raise ValueError(f"decay gamma must be in (0, 1], got {decay_gamma}")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_gamma = float(decay_gamma)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p, m, v in zip(self.names, self.params, self.m, self.v):
            if p.grad is None:
                raise MissingGradError(f"no gradient for parameter {name!r}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def decay_lr(self):
        self.lr *= self.decay_gamma

    # moment buffers travel inside checkpoints so training can resume
    def state_arrays(self):
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, blobs, step_count, lr):
        for i, name in enumerate(self.names):
            self.m[i] = blobs[f"adam.m.{name}"].astype(self.params[i].data.dtype)
            self.v[i] = blobs[f"adam.v.{name}"].astype(self.params[i].data.dtype)
        self.step_count = int(step_count)
        self.lr = float(lr)
