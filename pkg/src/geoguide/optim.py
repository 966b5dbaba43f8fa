"""Adam with a linear warmup / linear decay learning-rate schedule."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.03
    total_steps: int = 2000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def warmup_steps(self):
        return int(round(self.warmup_ratio * self.total_steps))


def lr_at(step, state):
    """Linear ramp 0 -> peak over the warmup, then linear decay to 0 at ``total_steps``."""
    total = state.total_steps
    if total <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside 0..{total}")
    warm = state.warmup_steps
    # ratio first, so the peak step returns peak_lr exactly
    if warm > 0 and step <= warm:
        return state.peak_lr * (step / warm)
    return state.peak_lr * ((total - step) / (total - warm))


def adam_step(params, state):
    """One bias-corrected Adam update over ``(name, DiffTensor)`` pairs, in place.

    The update at ``state.step == t`` uses ``lr_at(t)`` and bias corrections
    for ``t + 1`` updates. Parameters with ``requires_grad=False`` or no
    gradient are left untouched. Returns the learning rate used.
    """
    b1, b2 = state.betas
    t = state.step + 1
    lr = lr_at(min(state.step, state.total_steps), state)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr
