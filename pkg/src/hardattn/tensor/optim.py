"""Adam with bias correction and a plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import TensorError
from .nn import Parameter


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_tolerance: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2", "plateau_factor"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState, cfg: OptimConfig, lr: float | None = None) -> AdamState:
    """Update ``params`` in place; parameters whose grad is None are skipped."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise TensorError("params, grads and moment buffers differ in length")
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise TensorError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Parameter], cfg: OptimConfig | None = None):
        self.params = list(params)
        self.cfg = cfg or OptimConfig()
        self.lr = self.cfg.learning_rate
        self.state = AdamState()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.cfg, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def plateau_schedule(history: Sequence[float], cfg: OptimConfig, lr: float | None = None) -> float:
    """Learning rate after replaying a lower-is-better validation series.

    A plateau is ``plateau_patience`` consecutive epochs without beating the
    best value by more than ``plateau_tolerance``; each plateau multiplies the
    rate by ``plateau_factor`` and restarts the count.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    lr = cfg.learning_rate if lr is None else lr
    best = np.inf
    stale = 0
    for value in history:
        if value < best - cfg.plateau_tolerance:
            best = value
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                stale = 0
    return lr
