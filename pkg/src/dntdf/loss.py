"""Boundary-aware weighted binary cross entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Function, ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 3.0
    delta: int = 10
    eps: float = 1e-6
    normalize: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")


def _box_mean(y: np.ndarray, delta: int, axis: int) -> np.ndarray:
    """Mean over a (2*delta+1) window along ``axis``.

    The border is mirrored without repeating the edge sample when the
    window fits (delta <= n - 1); otherwise the edge value is replicated.
    """
    n = y.shape[axis]
    mode = "reflect" if delta <= n - 1 else "edge"
    pad = [(0, 0)] * y.ndim
    pad[axis] = (delta, delta)
    padded = np.pad(y, pad, mode=mode)
    c = np.cumsum(padded, axis=axis, dtype=np.float64)
    zero_shape = list(c.shape)
    zero_shape[axis] = 1
    c = np.concatenate([np.zeros(zero_shape), c], axis=axis)
    k = 2 * delta + 1
    hi = np.take(c, np.arange(k, k + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    return (hi - lo) / k


def edge_weight_alpha(y, delta: int = 10) -> np.ndarray:
    """|local window mean of Y - Y| over the last two axes; zero inside flat regions."""
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    y = np.asarray(y, dtype=np.float64)
    m = _box_mean(_box_mean(y, delta, y.ndim - 2), delta, y.ndim - 1)
    return np.clip(np.abs(m - y), 0.0, 1.0)


class WeightedBCE(Function):
    tag = "weighted_bce"

    @staticmethod
    def infer_shape(p, target=None, weight=None, eps=1e-6, normalize=True):
        return ()

    def forward(self, p, target, weight, eps=1e-6, normalize=True):
        if target.shape != p.shape or weight.shape != p.shape:
            raise ShapeError(f"prediction {p.shape}, target {target.shape} and weight {weight.shape} must match")
        q = np.clip(p.astype(np.float64), eps, 1.0 - eps)
        self.dtype = p.dtype
        self.q, self.y, self.w = q, target, weight
        self.inside = (p >= eps) & (p <= 1.0 - eps)
        self.norm = float(weight.sum()) if normalize else 1.0
        bce = -(target * np.log(q) + (1.0 - target) * np.log1p(-q))
        return np.asarray((weight * bce).sum() / self.norm, dtype=p.dtype)

    def backward(self, grad):
        g = self.w * ((1.0 - self.y) / (1.0 - self.q) - self.y / self.q) / self.norm
        g = np.where(self.inside, g, 0.0) * grad
        return (g.astype(self.dtype),)


def weighted_bce(p: Tensor, y, cfg: LossConfig = LossConfig(), alpha=None) -> Tensor:
    """Sum of (1 + gamma*alpha) * BCE, divided by sum(1 + gamma*alpha) unless ``normalize`` is off.

    ``alpha`` may be passed precomputed (it depends only on the mask).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"mask shape {y.shape} does not match prediction shape {p.shape}")
    if alpha is None:
        alpha = edge_weight_alpha(y, cfg.delta)
    weight = 1.0 + cfg.gamma * np.asarray(alpha, dtype=np.float64)
    return WeightedBCE.apply(p, target=y, weight=weight, eps=cfg.eps, normalize=cfg.normalize)
