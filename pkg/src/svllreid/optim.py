"""Adam and the two learning-rate schedules used by the training stages."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and Adam moments differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != np.shape(g) or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {np.shape(g)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper that owns an ``AdamState`` for a fixed parameter list."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def step(self, grads, lr):
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)


def cosine_lr(epoch, total_epochs, base=3.5e-4):
    """Half-cosine annealing from ``base`` at epoch 0 to zero at ``total_epochs``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _dec(x):
    return Decimal(repr(float(x)))


def warmup_step_lr(epoch, start=5e-7, peak=5e-6, warmup_epochs=10,
                   milestones=(30, 50), gamma=0.1):
    """Linear warm-up from ``start`` to ``peak``, then step decay by ``gamma``.

    The arithmetic is carried out in decimal on the shortest repr of each
    hyper-parameter, so decimal literals such as 5e-6 * 0.1 land exactly on
    5e-7 instead of 5.000000000000001e-07.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch < warmup_epochs:
        frac = _dec(epoch) / _dec(warmup_epochs)
        return float(_dec(start) + (_dec(peak) - _dec(start)) * frac)
    n = sum(1 for m in milestones if epoch >= m)
    return float(_dec(peak) * _dec(gamma) ** n)


@dataclass
class LrSchedule:
    variant: str = "cosine"
    base: float = 3.5e-4
    total_epochs: int = 60
    warmup_epochs: int = 10
    warmup_start: float = 5e-7
    decay_epochs: tuple = (30, 50)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.variant not in ("cosine", "warmup-step"):
            raise ValueError(f"unknown schedule variant {self.variant!r}")
        self.decay_epochs = tuple(self.decay_epochs)

    def __call__(self, epoch):
        if self.variant == "cosine":
            return cosine_lr(epoch, self.total_epochs, self.base)
        return warmup_step_lr(epoch, self.warmup_start, self.base, self.warmup_epochs,
                              self.decay_epochs, self.decay_factor)
