"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ConfigurationError, DeterminismError


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-3,
    n_samples: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``n_samples`` coordinates are drawn uniformly over all parameter entries.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Run in float64 for meaningful results at ``eps=1e-3``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigurationError(f"eps={eps} outside [1e-5, 1e-2]")
    names = list(params)
    for p in params.values():
        p.grad = None
    with torch.no_grad():
        f0 = float(loss_fn())
        f1 = float(loss_fn())
    if f0 != f1:
        raise DeterminismError(f"loss_fn is not deterministic: {f0!r} != {f1!r}")

    with torch.enable_grad():
        loss = loss_fn()
        loss.backward()
    analytic = {n: (params[n].grad.detach().clone() if params[n].grad is not None
                    else torch.zeros_like(params[n])) for n in names}

    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for fi in np.sort(flat_idx):
            k = int(np.searchsorted(offsets, fi, side="right") - 1)
            name, local = names[k], int(fi - offsets[k])
            flat = params[name].view(-1)
            orig = flat[local].item()
            flat[local] = orig + eps
            fp = float(loss_fn())
            flat[local] = orig - eps
            fm = float(loss_fn())
            flat[local] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[name].view(-1)[local])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
