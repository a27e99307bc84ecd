"""Client optimizers (plain SGD, two-step SAM) and the round-level learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    base_lr: float = 0.01

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise InputError("rho must be finite and non-negative")
        if not (np.isfinite(self.base_lr) and self.base_lr > 0):
            raise InputError("base_lr must be finite and positive")


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant: ``base_lr`` before ``swa_start_round``, ``swa_lr`` from it on."""

    base_lr: float
    swa_lr: float
    swa_start_round: int
    total_rounds: int

    def __post_init__(self):
        if not 0 <= self.swa_start_round <= self.total_rounds:
            raise InputError("need 0 <= swa_start_round <= total_rounds")


def sgd_step(params, gradient, lr: float) -> np.ndarray:
    if lr <= 0:
        raise InputError("lr must be positive")
    return np.asarray(params, dtype=np.float64) - lr * np.asarray(gradient, dtype=np.float64)


def sam_step(
    params,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    rho: float,
    lr: float,
    extra_grad=None,
) -> np.ndarray:
    """One sharpness-aware step.

    Ascends to ``params + rho * g / ||g||`` and descends from ``params`` using
    the gradient taken there. ``extra_grad`` (already evaluated at the base
    point) is added to the descent direction; the curvature penalty rides in
    through it. A zero gradient or ``rho == 0`` reduces to :func:`sgd_step`.
    """
    params = np.asarray(params, dtype=np.float64)
    g = grad_fn(params)
    g_norm = float(np.linalg.norm(g))
    if rho == 0.0 or g_norm == 0.0:
        step_grad = g
    else:
        step_grad = grad_fn(params + (rho / g_norm) * g)
    if extra_grad is not None:
        step_grad = step_grad + extra_grad
    return sgd_step(params, step_grad, lr)


def sam_step_model(spec, params, batch, cfg: SamConfig, loss_grad=None) -> np.ndarray:
    """:func:`sam_step` on a model's mean batch loss (``loss_grad`` defaults to ``nn.grad``)."""
    from . import nn

    loss_grad = loss_grad or nn.grad
    return sam_step(params, lambda p: loss_grad(spec, p, batch), cfg.rho, cfg.base_lr)


def lr_at_round(sched: LrSchedule, r: int) -> float:
    if not 0 <= r < sched.total_rounds:
        raise InputError(f"round {r} outside [0, {sched.total_rounds})")
    return sched.base_lr if r < sched.swa_start_round else sched.swa_lr
