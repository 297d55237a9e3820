"""Adam and the warmup + cosine learning-rate schedule."""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimState", "cosine_lr", "adam_step"]

_warned_past_end = False


def cosine_lr(step, total, warmup_ratio, base_lr):
    """Linear warmup over ``ceil(warmup_ratio * total)`` steps, then cosine decay to 0."""
    global _warned_past_end
    if step > total:
        if not _warned_past_end:
            warnings.warn(f"step {step} past schedule end {total}; learning rate clamped to 0")
            _warned_past_end = True
        return 0.0
    warmup = math.ceil(warmup_ratio * total)
    if step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    base_lr: float = 2e-5
    warmup_ratio: float = 0.03
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def lr(self):
        return cosine_lr(self.step, self.total_steps, self.warmup_ratio, self.base_lr)


def adam_step(state, params, grads, trainable=None):
    """One Adam update in place on ``params``; returns the learning rate used.

    The schedule is sampled at the post-increment step so the very first
    update is not wasted on a zero warmup rate.
    """
    state.step += 1
    lr = state.lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if trainable is not None and not trainable.get(name, False):
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
