"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import numpy as np


def lr_schedule(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0 -> peak over warmup_steps, then cosine decay to 0 at
    total_steps. Steps past the end stay at 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    progress = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Updates are in place and deterministic; the schedule step used for the
    k-th call is k (zero-based), matching lr_schedule."""

    def __init__(self, params, peak_lr=1e-4, warmup_steps=4000, total_steps=500_000,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads) -> float:
        """One update; returns the learning rate that was applied."""
        lr = lr_schedule(self.step_count, self.peak_lr, self.warmup_steps, self.total_steps)
        b1, b2 = self.betas
        t = self.step_count + 1
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for key, p in params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= lr * update
        self.step_count += 1
        return lr
