"""Adam-style optimizer with decoupled weight decay, plus learning-rate schedules.

Defaults follow the fine-tuning recipe this package implements: beta1 0.9,
beta2 0.98, stability constant 1e-3, weight decay 0.01. Decay is applied only
where explicitly flagged and never to noise or prior-variance parameters
(decaying a log-std toward 0 would silently pull variances toward 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class StepDecay:
    init: float
    factor: float
    every: int
    floor: float


LrSchedule = Constant | StepDecay


def schedule_value(sched: LrSchedule, update_index: int) -> float:
    """Learning rate at a 0-based gradient-update index; pure function."""
    if update_index < 0:
        raise ValueError("schedule_value: update_index must be >= 0")
    if isinstance(sched, Constant):
        return sched.value
    return max(sched.floor, sched.init * sched.factor ** (update_index // sched.every))


class AdamState:
    """Moment accumulators for a set of named flat parameter arrays."""

    def __init__(self, sizes: dict[str, int], beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-3, weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros(n) for name, n in sizes.items()}
        self.v = {name: np.zeros(n) for name, n in sizes.items()}


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: dict[str, float] | float,
              apply_weight_decay: dict[str, bool] | bool = False) -> bool:
    """One bias-corrected update over all named arrays, in place.

    If any gradient is non-finite the whole step is skipped (state untouched)
    and a warning is logged; returns whether the step was applied.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logger.warning("adam_step: non-finite gradient for '%s'; step skipped", name)
            return False
    state.t += 1
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        decay = apply_weight_decay[name] if isinstance(apply_weight_decay, dict) \
            else apply_weight_decay
        kernels.adam_update(
            p, state.m[name], state.v[name], grads[name], state.t, rate,
            state.beta1, state.beta2, state.eps,
            state.weight_decay if decay else 0.0,
        )
    return True
