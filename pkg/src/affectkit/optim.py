"""Optimizer and training-loop settings shared by the trainers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import torch


@dataclass(frozen=True)
class OptimizerSpec:
    """AdamW hyperparameters plus loop bookkeeping.

    Step-driven loops (pretraining) read `steps`; epoch-driven loops read
    `epochs`. The unused one may stay None.
    """

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    steps: Optional[int] = None
    epochs: Optional[int] = None
    seed: int = 0
    log_every: int = 10

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1 when set")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1 when set")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def build(self, params: Iterable[torch.nn.Parameter]) -> torch.optim.AdamW:
        return torch.optim.AdamW(params, lr=self.lr,
                                 betas=(self.beta1, self.beta2),
                                 weight_decay=self.weight_decay)

    def with_seed(self, seed: int) -> "OptimizerSpec":
        return replace(self, seed=seed)


def require_steps(spec: OptimizerSpec) -> int:
    if spec.steps is None:
        raise ValueError("this trainer needs OptimizerSpec.steps")
    return spec.steps


def require_epochs(spec: OptimizerSpec) -> int:
    if spec.epochs is None:
        raise ValueError("this trainer needs OptimizerSpec.epochs")
    return spec.epochs
