"""Central-difference gradient checking in 64-bit arithmetic."""
from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad, precision, reset_graph

ArrayLike = Union[np.ndarray, Sequence[np.ndarray]]


def numerical_grads(fn: Callable[..., Tensor], arrays: list[np.ndarray], eps: float) -> list[np.ndarray]:
    out = []
    with no_grad():
        for k, base in enumerate(arrays):
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += eps
                minus[k][idx] -= eps
                fp = fn(*(Tensor(a) for a in plus)).item()
                fm = fn(*(Tensor(a) for a in minus)).item()
                g[idx] = (fp - fm) / (2 * eps)
            out.append(g)
    return out


def grad_check(fn: Callable[..., Tensor], point: ArrayLike, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` takes one tensor per array in ``point`` and returns a scalar
    tensor. The error for each coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) else \
        [np.array(p, dtype=np.float64) for p in point]
    with precision(np.float64):
        reset_graph()
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = fn(*tensors)
        backward(loss, params=tensors)
        analytic = [t.grad for t in tensors]
        numeric = numerical_grads(fn, arrays, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
