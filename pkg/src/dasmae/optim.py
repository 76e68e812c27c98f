"""AdamW with decoupled weight decay and a warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import ContractError, ShapeError
from .kernels import adamw_update
from .tensor import Tensor


@dataclass
class ScheduleConfig:
    """Linear warmup from zero to ``base_lr``, then cosine decay to ``min_lr``."""

    base_lr: float
    warmup_epochs: int
    total_epochs: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.total_epochs:
            raise ContractError(
                f"warmup_epochs must lie in [0, total_epochs), got "
                f"{self.warmup_epochs} / {self.total_epochs}")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ContractError(f"min_lr must lie in [0, base_lr], got {self.min_lr}")


def lr_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate for a zero-based epoch index."""
    if epoch < 0 or epoch >= cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """AdamW over a named parameter dict, backed by the fused update kernel.

    Decay is decoupled (multiplies the parameter before the moment-based
    step). Moments are float32 like the parameters they track.
    """

    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ContractError(f"lr must be non-negative, got {lr}")
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient buffer")
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {p.grad.shape} does not match parameter "
                    f"{name!r} shape {p.data.shape}")
            adamw_update(
                p.data.reshape(-1), p.grad.reshape(-1),
                self._m[name].reshape(-1), self._v[name].reshape(-1),
                self.step_count, lr, self.beta1, self.beta2,
                self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
