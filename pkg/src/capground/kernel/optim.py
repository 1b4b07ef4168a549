"""Adam optimizer with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators, one per named parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, applied in place.

    Uses the folded form lr' = lr * sqrt(1-b2^t)/(1-b1^t) so the m_hat and
    v_hat arrays never materialize.
    """
    state.t += 1
    correct2_sqrt = np.sqrt(1.0 - state.beta2**state.t)
    lr_t = lr * correct2_sqrt / (1.0 - state.beta1**state.t)
    eps_t = state.eps * correct2_sqrt
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != param {param.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        squared = grad * grad
        squared *= 1.0 - state.beta2
        v += squared
        denom = np.sqrt(v)
        denom += eps_t
        np.divide(m, denom, out=denom)
        denom *= lr_t
        param.data -= denom


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
