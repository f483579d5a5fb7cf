"""Adam optimizer and max-norm weight constraint."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from mirank.core.ops import DimensionError, NonFiniteError


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0, **hyper)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "param"):
    """One bias-corrected Adam step. Returns ``(new_param, new_state)``."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(f"adam_update: {name} has shape {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"adam_update: non-finite gradient for parameter {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_param = (param - step).astype(param.dtype, copy=False)
    return new_param, replace(state, m=m.astype(param.dtype, copy=False), v=v.astype(param.dtype, copy=False), t=t)


def max_norm_project(weights: np.ndarray, c: float, axis: int = 0) -> np.ndarray:
    """Rescale each slice along ``axis`` so its L2 norm is at most ``c``.

    A slice is every element sharing one index on ``axis`` (one output filter
    of a conv kernel, one output row of a dense matrix). Slices already within
    the bound are returned unchanged.
    """
    if c <= 0:
        raise ValueError("max_norm_project: c must be positive")
    axis = axis % weights.ndim
    other = tuple(a for a in range(weights.ndim) if a != axis)
    norms = np.sqrt(np.sum(np.square(weights, dtype=np.float64), axis=other, keepdims=True))
    over = norms > c
    scale = np.ones_like(norms)
    np.divide(c, norms, out=scale, where=over)
    if np.all(scale == 1.0):
        return weights.copy()
    return (weights * scale).astype(weights.dtype, copy=False)
