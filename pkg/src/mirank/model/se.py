"""Squeeze-and-excitation ranking layers.

Both ranking layers run the same computation and differ only in which axes
are pooled:

* electrode ranking pools each electrode row over time and gates the
  electrode axis; applied to the raw trial and, with one shared weight pair,
  to every feature map after the temporal convolution;
* feature-map ranking pools each map over electrodes and time and gates the
  map axis.

The gate is ``sigmoid(W2 @ relu(W1 @ z))`` with no bias terms, so an all-zero
pooled vector always yields ranks of exactly 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from mirank.core.ops import Context, DimensionError, Op


def hidden_width(n: int, reduction: int) -> int:
    return max(1, n // reduction)


class SqueezeExcite(Op):
    """Mean-pool the trailing ``n_pool`` axes, gate the axis just before them.

    The gated axis is the last non-pooled one; all leading axes are batch.
    ``forward`` returns ``(scaled, ctx)`` with the ranks in ``ctx['ranks']``.
    """

    inputs = ("x", "W1", "W2")

    def __init__(self, name: str, n_pool: int):
        self.name = name
        self.n_pool = n_pool

    def forward(self, x, W1, W2):
        gate_axis = x.ndim - self.n_pool - 1
        if gate_axis < 0:
            raise DimensionError(f"{self.name}: input of shape {x.shape} has too few axes")
        n = x.shape[gate_axis]
        if W1.ndim != 2 or W1.shape[1] != n:
            raise DimensionError(f"{self.name}: W1 {W1.shape} does not match gated axis of size {n}")
        if W2.shape != (n, W1.shape[0]):
            raise DimensionError(f"{self.name}: W2 {W2.shape}, expected {(n, W1.shape[0])}")
        lead = x.shape[:gate_axis]
        flat = x.reshape(int(np.prod(lead, dtype=int)), n, -1)
        z = flat.mean(axis=-1)                # squeeze
        pre = z @ W1.T
        h = np.maximum(pre, 0)
        s = expit(h @ W2.T).astype(x.dtype, copy=False)   # excitation
        # keep ranks strictly inside (0, 1) even where the sigmoid saturates
        fi = np.finfo(s.dtype)
        s = np.clip(s, fi.tiny, 1 - fi.epsneg)
        out = (flat * s[..., None]).reshape(x.shape)
        ctx = Context(self.name, dict(flat=flat, z=z, pre=pre, h=h, s=s, W1=W1, W2=W2, shape=x.shape))
        ctx.saved["ranks"] = s.reshape(*lead, n)
        return out, ctx

    def backward(self, ctx, cot, need=None):
        flat, z, pre, h, s = ctx["flat"], ctx["z"], ctx["pre"], ctx["h"], ctx["s"]
        W1, W2 = ctx["W1"], ctx["W2"]
        g = cot.reshape(flat.shape)
        ds = np.einsum("lnp,lnp->ln", g, flat)
        da = ds * s * (1 - s)
        grads = {}
        if need is None or "W2" in need:
            grads["W2"] = da.T @ h
        need_upstream = need is None or "W1" in need or "x" in need
        if need_upstream:
            dpre = (da @ W2) * (pre > 0)
            if need is None or "W1" in need:
                grads["W1"] = dpre.T @ z
            if need is None or "x" in need:
                dz = dpre @ W1
                dx = g * s[..., None] + (dz / flat.shape[-1])[..., None]
                grads["x"] = dx.reshape(ctx["shape"]).astype(cot.dtype, copy=False)
        return grads


ELECTRODE_SE = SqueezeExcite("electrode_se", n_pool=1)
FEATUREMAP_SE = SqueezeExcite("featuremap_se", n_pool=2)


@dataclass
class ElectrodeSE:
    """Weights of one electrode ranking layer."""

    W1: np.ndarray
    W2: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.W1.shape[1]


@dataclass
class FeatureMapSE:
    """Weights of one feature-map ranking layer."""

    W1: np.ndarray
    W2: np.ndarray

    @property
    def n_maps(self) -> int:
        return self.W1.shape[1]


def electrode_se_forward(X: np.ndarray, layer: ElectrodeSE) -> tuple[np.ndarray, np.ndarray]:
    """Rank and rescale the electrodes of a single trial ``X`` (N_c, N_s).

    Returns the scaled trial and the rank vector ``s_c``.
    """
    if X.ndim != 2:
        raise DimensionError(f"electrode_se_forward expects (N_c, N_s), got {X.shape}")
    if X.shape[0] != layer.n_channels:
        raise DimensionError(f"electrode axis has {X.shape[0]} channels, layer expects {layer.n_channels}")
    out, ctx = ELECTRODE_SE.forward(X, layer.W1, layer.W2)
    return out, ctx["ranks"]


def electrode_se_forward_per_map(Y: np.ndarray, layer: ElectrodeSE) -> tuple[np.ndarray, np.ndarray]:
    """Apply one electrode ranking layer to every map of ``Y`` (N_f, N_c, N_s).

    All maps share the layer's weights; the per-map ranks (N_f, N_c) are
    returned alongside the scaled tensor.
    """
    if Y.ndim != 3:
        raise DimensionError(f"electrode_se_forward_per_map expects (N_f, N_c, N_s), got {Y.shape}")
    if Y.shape[1] != layer.n_channels:
        raise DimensionError(f"electrode axis has {Y.shape[1]} channels, layer expects {layer.n_channels}")
    out, ctx = ELECTRODE_SE.forward(Y, layer.W1, layer.W2)
    return out, ctx["ranks"]


def featuremap_se_forward(Y: np.ndarray, layer: FeatureMapSE) -> tuple[np.ndarray, np.ndarray]:
    """Rank and rescale the maps of ``Y`` (N_f, N_c, N_s); returns ``(Y_scaled, s_F)``."""
    if Y.ndim != 3:
        raise DimensionError(f"featuremap_se_forward expects (N_f, N_c, N_s), got {Y.shape}")
    if Y.shape[0] != layer.n_maps:
        raise DimensionError(f"map axis has {Y.shape[0]} maps, layer expects {layer.n_maps}")
    out, ctx = FEATUREMAP_SE.forward(Y[None], layer.W1, layer.W2)
    return out[0], ctx["ranks"][0]
