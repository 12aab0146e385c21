"""SGD with momentum, coupled weight decay, and mask-aware updates.

Masked-out entries receive no decay and no momentum and stay bit-exact
zero; frozen (non-trainable) parameters are untouched entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ScheduleError
from .models import ParamStore

LINEAR_WARMUP_DECAY = "linear-warmup-linear-decay"
COSINE = "cosine"
CONSTANT = "constant"


@dataclass(frozen=True)
class LrSchedule:
    kind: str = LINEAR_WARMUP_DECAY
    peak: float = 0.5
    warmup_end: int = 0
    total_steps: int = 1


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an integer step; piecewise linear for the default kind."""
    if step < 0 or step > schedule.total_steps:
        raise ScheduleError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == CONSTANT:
        return schedule.peak
    w, total = schedule.warmup_end, schedule.total_steps
    if schedule.kind == LINEAR_WARMUP_DECAY:
        if step <= w:
            return schedule.peak if w == 0 else schedule.peak * step / w
        return schedule.peak * (total - step) / (total - w)
    if schedule.kind == COSINE:
        if step <= w:
            return schedule.peak if w == 0 else schedule.peak * step / w
        frac = (step - w) / (total - w)
        return schedule.peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ScheduleError(f"unknown lr schedule kind {schedule.kind!r}")


class SgdState:
    def __init__(
        self,
        store: ParamStore,
        schedule: LrSchedule,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        if not 0.0 <= momentum < 1.0:
            raise ScheduleError("momentum must be in [0, 1)")
        if weight_decay < 0.0:
            raise ScheduleError("weight decay must be >= 0")
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {
            name: np.zeros_like(e.weights) for name, e in store.items()
        }


def sgd_step(store: ParamStore, grads: dict[str, np.ndarray], state: SgdState, step: int) -> None:
    """One update: g' = g + wd*w, m <- beta*m + g', w <- w - lr*m.

    Masked entries keep w == 0 and m == 0 exactly; frozen entries are skipped.
    """
    lr = np.float32(lr_at(state.schedule, step))
    beta = np.float32(state.momentum)
    wd = np.float32(state.weight_decay)
    for name, entry in store.items():
        if not entry.trainable:
            continue
        g = grads[name]
        w = entry.weights
        m = state.buffers[name]
        if wd != 0.0:
            g = g + wd * w
        if beta != 0.0:
            m *= beta
            m += g
        else:
            m[...] = g
        w -= lr * m
        if entry.mask is not None:
            dead = entry.mask == 0.0
            w[dead] = 0.0
            m[dead] = 0.0
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"non-finite update for {name}")


def reset_momentum(state: SgdState, changed: dict[str, np.ndarray]) -> None:
    """Zero momentum for entries whose mask membership just changed."""
    for name, flags in changed.items():
        if name in state.buffers and flags.any():
            state.buffers[name][flags.astype(bool)] = 0.0
