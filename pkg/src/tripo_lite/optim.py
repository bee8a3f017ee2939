"""AdamW with linear warmup followed by cosine annealing to zero."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    base_lr: float = 4e-4
    warmup_steps: int = 2000
    total_steps: int = 30000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at_step(cfg: OptimizerConfig, step: int) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list, cfg: OptimizerConfig, lr_scale: list | None = None):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.lr_scale = lr_scale or [1.0] * len(params)
        self.t = 0

    def step(self, params: list, grads: list, lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite gradients."""
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match parameters")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                log.warning("rejected optimizer step %d: non-finite gradient in array %d", self.t + 1, i)
                return False
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v, scale in zip(params, grads, self.m, self.v, self.lr_scale):
            step_lr = lr * scale
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p *= 1.0 - step_lr * c.weight_decay
            p -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return True
