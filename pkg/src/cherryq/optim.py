"""Adam with decoupled weight decay, and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """In-place AdamW update. A ``None`` gradient is treated as zeros."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ConfigError("adam_step: params, grads and state lengths differ")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ConfigError(f"adam_step: shape mismatch {g.shape} vs {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps_opt)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper; reads ``.grad`` off each parameter."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps_opt=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps_opt, self.weight_decay = beta1, beta2, eps_opt, weight_decay
        self.state = AdamState.for_params(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.beta1, self.beta2, self.eps_opt, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def hyperparams(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps_opt": self.eps_opt,
                "weight_decay": self.weight_decay}


def cosine_lr(step: int, total_steps: int, warmup_frac: float = 0.05, floor_frac: float = 0.25,
              peak_lr: float = 1.0) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``floor_frac * peak_lr``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_frac < 1 or not 0 <= floor_frac <= 1:
        raise ConfigError("warmup_frac must be in [0, 1) and floor_frac in [0, 1]")
    warmup = warmup_frac * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    floor = floor_frac * peak_lr
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
