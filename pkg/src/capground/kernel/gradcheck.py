"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward
from ..util import rng_stream


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    max_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    At most `max_coords` coordinates are sampled per parameter tensor.
    The closure must be deterministic (fixed rng for any dropout masks).
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    loss = loss_fn()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = rng_stream(seed, 0)
    per_param: dict[str, float] = {}
    worst_param = ""
    worst = 0.0
    for name, param in params.items():
        flat = param.data.reshape(-1)
        size = flat.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        grads_flat = analytic[name].reshape(-1)
        local_worst = 0.0
        for c in coords:
            original = flat[c]
            flat[c] = original + step
            plus = float(loss_fn().data)
            flat[c] = original - step
            minus = float(loss_fn().data)
            flat[c] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(grads_flat[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            local_worst = max(local_worst, rel)
        per_param[name] = local_worst
        if local_worst >= worst:
            worst = local_worst
            worst_param = name
    return GradCheckReport(max_rel_error=worst, worst_param=worst_param, per_param=per_param)
