"""Adam, warmup + cosine-with-restarts schedule, and gradient accumulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to every non-locked parameter.

    Moments are keyed by parameter name. Gradients are cleared afterwards.
    """
    missing = [p.name for p in params if not p.locked and p.grad is None]
    if missing:
        raise RuntimeError(f"adam_step: no gradient for {missing[:5]}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        if p.locked:
            p.grad = None
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.name]
        m = (b1 * m + (1 - b1) * g).astype(np.float32)
        v = (b2 * v + (1 - b2) * g * g).astype(np.float32)
        state.m[p.name] = m
        state.v[p.name] = v
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(np.float32)
        p.grad = None


@dataclass
class LrSchedule:
    """Linear warmup, then cosine decay that restarts every ``cycle_length + 1`` steps.

    ``num_restarts`` extra cycles follow the first; after the last cycle the
    rate stays at zero.
    """

    base_lr: float = 5e-6
    warmup_steps: int = 100
    cycle_length: int = 1000
    num_restarts: int = 0

    @classmethod
    def for_run(cls, base_lr: float, warmup_steps: int, total_steps: int, num_restarts: int = 0):
        span = max(1, total_steps - warmup_steps)
        return cls(base_lr, warmup_steps, max(1, span // (num_restarts + 1)), num_restarts)


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * step / w
    period = schedule.cycle_length + 1
    cycle, t = divmod(step - w, period)
    if cycle > schedule.num_restarts:
        return 0.0
    return max(0.0, schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / schedule.cycle_length)))


def accumulate_and_maybe_step(
    params: list[Parameter],
    state: AdamState,
    schedule: LrSchedule,
    micro_step: int,
    accumulation: int,
) -> bool:
    """Call once after each micro-batch backward; ``micro_step`` counts from 1.

    Gradients keep summing in ``.grad`` until ``accumulation`` micro-batches
    have been seen, then they are averaged and one Adam update is applied at
    the scheduled rate for the current optimizer step.
    """
    if accumulation < 1:
        raise ValueError("accumulation must be >= 1")
    if micro_step % accumulation:
        return False
    if accumulation > 1:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad / np.float32(accumulation)
    adam_step(params, state, lr_at_step(schedule, state.step_count))
    return True
