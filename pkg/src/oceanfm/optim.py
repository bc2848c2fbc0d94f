"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .errors import DivergenceError


@dataclass
class OptimizerState:
    peak_lr: float
    total_steps: int
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    @classmethod
    def for_run(cls, peak_lr: float, total_steps: int, warmup_frac: float = 0.05, **kw):
        warmup = int(math.ceil(warmup_frac * total_steps)) if total_steps else 0
        return cls(peak_lr=peak_lr, total_steps=total_steps, warmup_steps=warmup, **kw)


def scheduled_lr(state: OptimizerState, step: int | None = None) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``."""
    s = state.step if step is None else step
    if state.warmup_steps and s < state.warmup_steps:
        return state.peak_lr * (s + 1) / state.warmup_steps
    span = max(state.total_steps - state.warmup_steps, 1)
    progress = min(max(s - state.warmup_steps, 0) / span, 1.0)
    return 0.5 * state.peak_lr * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], state: OptimizerState, lr: float) -> None:
    """Update ``params`` in place from their ``.grad`` and advance ``state.step``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in parameter '{name}' at step {state.step}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
