"""Adam with bias correction and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, PoisonedStateError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Apply one Adam update in place.

    ``params`` maps names to tensors (or arrays); ``grads`` maps the same
    names to gradient arrays.  All gradients are checked before any
    parameter is touched, so a poisoned step leaves the state untouched.
    """
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        data = p.data if isinstance(p, Tensor) else p
        if g.shape != data.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {data.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient in {name} at step {state.step}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        data = p.data if isinstance(p, Tensor) else p
        dt = data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in (0, 1)")
        if not self.max_lr > 0:
            raise ContractError("max_lr must be positive")

    @property
    def warmup_steps(self) -> int:
        return min(self.total_steps - 1, max(1, round(self.warmup_fraction * self.total_steps)))


def one_cycle_lr(sched: OneCycleSchedule, step: int) -> float:
    """Linear ramp from ``max_lr/25`` to ``max_lr``, then cosine to ``max_lr/1e4``."""
    if not 0 <= step < sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps})")
    lo = sched.max_lr / sched.start_div
    if sched.total_steps == 1:
        return sched.max_lr
    w = sched.warmup_steps
    if step <= w:
        return lo + (sched.max_lr - lo) * step / w
    final = sched.max_lr / sched.final_div
    span = sched.total_steps - 1 - w
    t = (step - w) / span
    return final + (sched.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))
