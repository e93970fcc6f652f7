"""Adam with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # decoupled: decay applied directly to the parameter, scaled by lr,
    # independent of the gradient moments. False folds decay into the
    # gradient before the moment updates (classic L2).
    decoupled: bool = True


@dataclass
class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: AdamConfig,
    decay_skip: frozenset[str] = frozenset(),
) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``decay_skip`` names parameters exempt from weight decay (norm affine
    parameters and biases, typically).
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"grad/param shape mismatch for '{name}': {g.shape} vs {p.shape}")
        decay = cfg.weight_decay if name not in decay_skip else 0.0
        if decay and not cfg.decoupled:
            g = g + decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        if decay and cfg.decoupled:
            p -= lr * decay * p
        p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from zero to ``alpha0``, then cosine decay to ``alpha_e``."""

    alpha0: float
    alpha_e: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps)")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at ``step`` in [0, total_steps].

    During warmup the rate ramps linearly 0 -> alpha0 (reaching alpha0 at
    the end of warmup); afterwards it follows
    ``alpha_e + 0.5 * (alpha0 - alpha_e) * (1 + cos(pi * tau))`` with tau
    the fraction of post-warmup progress.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.alpha0 * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    tau = (step - schedule.warmup_steps) / span
    return schedule.alpha_e + 0.5 * (schedule.alpha0 - schedule.alpha_e) * (1.0 + math.cos(math.pi * tau))
