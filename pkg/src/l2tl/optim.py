"""Optimizers and learning-rate schedules.

The step functions are pure: they take parameter values, gradients and an
optimizer state and return new values and a new state, leaving the inputs
untouched. ``apply_step`` is the in-place convenience used by the trainers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class OptimizerState:
    """Auxiliary per-parameter state.

    ``slots`` holds one velocity array per parameter for ``sgd-momentum`` and
    interleaved first/second moment arrays (m0, v0, m1, v1, ...) for ``adam``.
    """

    kind: str
    slots: tuple[np.ndarray, ...] = ()
    step: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.step < 0:
            raise ValueError("step count must be non-negative")
        if self.kind == "adam" and self.eps <= 0:
            raise ValueError("adam eps must be positive")


def sgd_momentum_state(params: Sequence[np.ndarray], momentum: float = 0.9) -> OptimizerState:
    return OptimizerState("sgd-momentum", tuple(np.zeros_like(p) for p in params),
                          momentum=momentum)


def adam_state(params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> OptimizerState:
    slots = []
    for p in params:
        slots += [np.zeros_like(p), np.zeros_like(p)]
    return OptimizerState("adam", tuple(slots), beta1=beta1, beta2=beta2, eps=eps)


def _check_shapes(params, grads, slots, per_param):
    if len(params) != len(grads) or len(slots) != per_param * len(params):
        raise ValueError(f"got {len(params)} params, {len(grads)} grads and "
                         f"{len(slots)} state slots")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} but gradient {g.shape}")
        for s in slots[per_param * i: per_param * (i + 1)]:
            if s.shape != p.shape:
                raise ValueError(f"param {i}: shape {p.shape} but state {s.shape}")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      state: OptimizerState, lr: float):
    """Heavy-ball SGD: ``v' = momentum * v + g`` then ``p' = p - lr * v'``."""
    if state.kind != "sgd-momentum":
        raise ValueError(f"expected sgd-momentum state, got {state.kind}")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_shapes(params, grads, state.slots, 1)
    velocities = tuple(state.momentum * v + g for v, g in zip(state.slots, grads))
    new_params = [p - lr * v for p, v in zip(params, velocities)]
    return new_params, replace(state, slots=velocities, step=state.step + 1)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState, lr: float):
    """Bias-corrected Adam update."""
    if state.kind != "adam":
        raise ValueError(f"expected adam state, got {state.kind}")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_shapes(params, grads, state.slots, 2)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    slots = []
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.slots[2 * i] + (1.0 - b1) * g
        v = b2 * state.slots[2 * i + 1] + (1.0 - b2) * g * g
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        slots += [m, v]
    return new_params, replace(state, slots=tuple(slots), step=t)


def apply_step(params: Sequence[Tensor], state: OptimizerState, lr: float,
               mask: Sequence[bool] | None = None) -> OptimizerState:
    """Run one optimizer step on tensors in place and clear their gradients.

    Parameters whose ``grad`` is None are treated as having zero gradient.
    ``mask`` freezes parameters whose entry is False (their state is kept).
    """
    values = [p.data for p in params]
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    step = sgd_momentum_step if state.kind == "sgd-momentum" else adam_step
    new_values, new_state = step(values, grads, state, lr)
    if mask is not None:
        per = 1 if state.kind == "sgd-momentum" else 2
        slots = list(new_state.slots)
        for i, keep in enumerate(mask):
            if not keep:
                new_values[i] = values[i]
                slots[per * i: per * (i + 1)] = state.slots[per * i: per * (i + 1)]
        new_state = replace(new_state, slots=tuple(slots))
    for p, v in zip(params, new_values):
        p.data = v
        p.grad = None
    return new_state


@dataclass(frozen=True)
class LrSchedule:
    """Constant or linear-warmup-then-cosine learning rate."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(schedule: LrSchedule, i: int) -> float:
    if not 0 <= i <= schedule.total_steps:
        raise ValueError(f"step {i} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    w = schedule.warmup_steps
    if i < w:
        return schedule.base_lr * i / w
    progress = (i - w) / (schedule.total_steps - w)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
