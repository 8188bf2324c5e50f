"""Differentiable primitives on NCHW tensors.

Resizing and adaptive pooling are both separable linear maps, so each is
implemented as a pair of small matrices applied along H and W; the backward
pass applies the transposes.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Function, MetaTensor, ShapeError, Tensor

__all__ = [
    "conv2d", "bilinear_resize", "adaptive_avg_pool", "relu", "sigmoid", "concat",
    "add", "mul", "scale", "sum", "max_pool2d", "channel_affine",
    "interp_matrix", "pool_matrix", "conv_out_size",
]


def _check4(shape, what: str) -> None:
    if len(shape) != 4:
        raise ShapeError(f"{what}: expected a rank-4 (N, C, H, W) tensor, got shape {tuple(shape)}")


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------------
# convolution


class Conv2d(Function):
    tag = "conv2d"

    @staticmethod
    def infer_shape(x, w, b=None, stride=1, padding=0):
        _check4(x, "conv2d input")
        if len(w) != 4 or w[2] != w[3]:
            raise ShapeError(f"conv2d kernel must be (C_out, C_in, k, k), got {tuple(w)}")
        if x[1] != w[1]:
            raise ShapeError(f"conv2d channel mismatch: input has C_in={x[1]}, kernel expects C_in={w[1]}")
        if b is not None and tuple(b) != (w[0],):
            raise ShapeError(f"conv2d bias must have shape ({w[0]},), got {tuple(b)}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        k = w[2]
        ho, wo = conv_out_size(x[2], k, stride, padding), conv_out_size(x[3], k, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty: input H={x[2]}, W={x[3]}, k={k}")
        return (x[0], w[0], ho, wo)

    def forward(self, x, w, b=None, stride=1, padding=0):
        self.infer_shape(x.shape, w.shape, None if b is None else b.shape, stride, padding)
        n, c, h, wd = x.shape
        cout, _, k, _ = w.shape
        self.x_shape, self.stride, self.padding, self.k = x.shape, stride, padding, k
        self.has_bias = b is not None
        w2 = w.reshape(cout, -1)
        self.w2 = w2
        if k == 1 and stride == 1 and padding == 0:
            cols = x.reshape(n, c, h * wd)
            ho, wo = h, wd
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
            ho = conv_out_size(h, k, stride, padding)
            wo = conv_out_size(wd, k, stride, padding)
            sn, sc, sh, sw = xp.strides
            win = as_strided(xp, (n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride))
            cols = win.reshape(n, c * k * k, ho * wo)
        self.cols, self.out_hw = cols, (ho, wo)
        out = np.matmul(w2, cols)
        if b is not None:
            out += b[None, :, None]
        return out.reshape(n, cout, ho, wo)

    def backward(self, grad):
        n, c, h, wd = self.x_shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = self.out_hw
        g2 = grad.reshape(n, -1, ho * wo)
        gx = gw = gb = None
        if self.needs_grad[1]:
            gw = np.tensordot(g2, self.cols, axes=([0, 2], [0, 2])).reshape(-1, c, k, k)
        if self.has_bias and self.needs_grad[2]:
            gb = g2.sum(axis=(0, 2))
        if self.needs_grad[0]:
            gcols = np.matmul(self.w2.T, g2)
            if k == 1 and s == 1 and p == 0:
                gx = gcols.reshape(n, c, h, wd)
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
                gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return (gx, gw, gb) if self.has_bias else (gx, gw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0):
    """2-D cross-correlation with zero padding; output side is floor((H + 2p - k)/s) + 1."""
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# --------------------------------------------------------------------------
# separable linear resamplers


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of half-pixel bilinear weights with edge clamping."""
    return _interp_matrix(int(n_in), int(n_out))


@lru_cache(maxsize=256)
def _pool_matrix(n: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, n), dtype=np.float64)
    for i in range(bins):
        lo, hi = (i * n) // bins, ((i + 1) * n) // bins
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def pool_matrix(n: int, bins: int) -> np.ndarray:
    """(bins, n) averaging matrix; bin i covers [floor(i*n/bins), floor((i+1)*n/bins))."""
    return _pool_matrix(int(n), int(bins))


class _Separable(Function):
    """y = A_h @ x @ A_w^T over the two trailing axes."""

    def _run(self, x, ah, aw):
        self.ah, self.aw = ah.astype(x.dtype), aw.astype(x.dtype)
        return np.matmul(np.matmul(self.ah, x), self.aw.T)

    def backward(self, grad):
        return (np.matmul(np.matmul(self.ah.T, grad), self.aw),)


class BilinearResize(_Separable):
    tag = "bilinear_resize"

    @staticmethod
    def infer_shape(x, out_h, out_w):
        _check4(x, "bilinear_resize input")
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"bilinear_resize target must be >= 1, got ({out_h}, {out_w})")
        return (x[0], x[1], int(out_h), int(out_w))

    def forward(self, x, out_h, out_w):
        self.infer_shape(x.shape, out_h, out_w)
        self.identity = (out_h, out_w) == x.shape[2:]
        if self.identity:
            return x.copy()
        return self._run(x, interp_matrix(x.shape[2], out_h), interp_matrix(x.shape[3], out_w))

    def backward(self, grad):
        if self.identity:
            return (grad,)
        return super().backward(grad)


def bilinear_resize(x: Tensor, out_h: int, out_w: int):
    return BilinearResize.apply(x, out_h=int(out_h), out_w=int(out_w))


class AdaptiveAvgPool(_Separable):
    tag = "adaptive_avg_pool"

    @staticmethod
    def infer_shape(x, bins):
        _check4(x, "adaptive_avg_pool input")
        if bins < 1:
            raise ShapeError(f"adaptive_avg_pool needs bins >= 1, got {bins}")
        if bins > x[2] or bins > x[3]:
            raise ShapeError(f"adaptive_avg_pool bins={bins} exceeds input spatial size {x[2]}x{x[3]}")
        return (x[0], x[1], bins, bins)

    def forward(self, x, bins):
        self.infer_shape(x.shape, bins)
        return self._run(x, pool_matrix(x.shape[2], bins), pool_matrix(x.shape[3], bins))


def adaptive_avg_pool(x: Tensor, bins: int):
    return AdaptiveAvgPool.apply(x, bins=int(bins))


# --------------------------------------------------------------------------
# pointwise


class ReLU(Function):
    tag = "relu"

    @staticmethod
    def infer_shape(x):
        return tuple(x)

    def forward(self, x):
        self.mask = x > 0  # subgradient 0 at the kink
        return np.maximum(x, 0).astype(x.dtype, copy=False)   # propagates NaN, unlike a mask

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    tag = "sigmoid"

    @staticmethod
    def infer_shape(x):
        return tuple(x)

    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Concat(Function):
    tag = "concat"

    @staticmethod
    def infer_shape(*shapes):
        if not shapes:
            raise ShapeError("concat needs at least one operand")
        for s in shapes:
            _check4(s, "concat operand")
        first = shapes[0]
        for s in shapes[1:]:
            if s[0] != first[0] or s[2:] != first[2:]:
                raise ShapeError(f"concat needs equal batch and spatial extents, got {tuple(first)} and {tuple(s)}")
        return (first[0], int(np.sum([s[1] for s in shapes])), first[2], first[3])

    def forward(self, *xs):
        self.infer_shape(*(x.shape for x in xs))
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


def _same_shape(a, b, what):
    if tuple(a) != tuple(b):
        raise ShapeError(f"{what} needs equal shapes, got {tuple(a)} and {tuple(b)}")
    return tuple(a)


class Add(Function):
    tag = "add"

    @staticmethod
    def infer_shape(a, b):
        return _same_shape(a, b, "add")

    def forward(self, a, b):
        self.infer_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    tag = "mul"

    @staticmethod
    def infer_shape(a, b):
        return _same_shape(a, b, "mul")

    def forward(self, a, b):
        self.infer_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    tag = "scale"

    @staticmethod
    def infer_shape(x, factor):
        return tuple(x)

    def forward(self, x, factor):
        self.factor = factor
        return x * np.asarray(factor, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


class Sum(Function):
    tag = "sum"

    @staticmethod
    def infer_shape(x):
        return ()

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def concat(xs: Sequence):
    """Stack along channels, preserving operand order."""
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    return Concat.apply(*xs)


def add(a, b):
    return Add.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def scale(x, factor: float):
    return Scale.apply(x, factor=float(factor))


def sum(x):  # noqa: A001 - mirrors numpy naming
    return Sum.apply(x)


# --------------------------------------------------------------------------
# encoder-only helpers (ResNet-style stems and frozen batch norm)


class MaxPool2d(Function):
    tag = "max_pool2d"

    @staticmethod
    def infer_shape(x, k, stride, padding):
        _check4(x, "max_pool2d input")
        return (x[0], x[1], conv_out_size(x[2], k, stride, padding), conv_out_size(x[3], k, stride, padding))

    def forward(self, x, k, stride, padding):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
        sn, sc, sh, sw = xp.strides
        win = as_strided(xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw))
        flat = win.reshape(n, c, ho, wo, k * k)
        self.arg = flat.argmax(axis=-1)
        self.geom = (x.shape, k, stride, padding, ho, wo)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (n, c, h, w), k, s, p, ho, wo = self.geom
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                hit = self.arg == i * k + j
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * hit
        return (gxp[:, :, p:p + h, p:p + w],)


def max_pool2d(x, k: int = 3, stride: int = 2, padding: int = 1):
    return MaxPool2d.apply(x, k=k, stride=stride, padding=padding)


class ChannelAffine(Function):
    """Per-channel ``x * scale + shift``; batch norm with frozen statistics."""

    tag = "channel_affine"

    @staticmethod
    def infer_shape(x, scale, shift):
        _check4(x, "channel_affine input")
        if tuple(scale) != (x[1],) or tuple(shift) != (x[1],):
            raise ShapeError(f"channel_affine needs ({x[1]},) scale/shift, got {tuple(scale)}, {tuple(shift)}")
        return tuple(x)

    def forward(self, x, scale, shift):
        self.infer_shape(x.shape, scale.shape, shift.shape)
        self.x, self.scale = x, scale
        return x * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(self, grad):
        return (grad * self.scale[None, :, None, None],
                (grad * self.x).sum(axis=(0, 2, 3)),
                grad.sum(axis=(0, 2, 3)))


def channel_affine(x, scale, shift):
    return ChannelAffine.apply(x, scale, shift)


def is_meta(x) -> bool:
    return isinstance(x, MetaTensor)
