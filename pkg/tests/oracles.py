"""Slow, loop-based reference implementations used as test oracles.

These are written directly from the textbook definitions, independently of
the vectorised code under test.
"""
import math

import numpy as np

EPS = np.spacing(1)


def conv2d_ref(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for cc in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b_, cc, y, xx] * w[o, cc, di, dj]
                    out[b_, o, i, j] = acc
    return out


def bilinear_ref(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))

    def taps(o, n_in, n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    for i in range(oh):
        y0, y1, fy = taps(i, h, oh)
        for j in range(ow):
            x0, x1, fx = taps(j, w, ow)
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


def adaptive_pool_ref(x, bins):
    n, c, h, w = x.shape
    out = np.zeros((n, c, bins, bins))
    for i in range(bins):
        for j in range(bins):
            y0, y1 = (i * h) // bins, ((i + 1) * h) // bins
            x0, x1 = (j * w) // bins, ((j + 1) * w) // bins
            out[:, :, i, j] = x[:, :, y0:y1, x0:x1].mean(axis=(2, 3))
    return out


def alpha_ref(y, delta):
    """Window mean via explicit index mirroring, one pixel at a time."""
    h, w = y.shape

    def mirror(i, n):
        if delta > n - 1:
            return min(max(i, 0), n - 1)
        if i < 0:
            return -i
        if i >= n:
            return 2 * (n - 1) - i
        return i

    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            total = 0.0
            for di in range(-delta, delta + 1):
                for dj in range(-delta, delta + 1):
                    total += y[mirror(i + di, h), mirror(j + dj, w)]
            out[i, j] = abs(total / (2 * delta + 1) ** 2 - y[i, j])
    return out


def bce_ref(p, y, alpha, gamma, eps=1e-6, normalize=True):
    num = den = 0.0
    for pv, yv, av in zip(p.ravel(), y.ravel(), alpha.ravel()):
        q = min(max(pv, eps), 1 - eps)
        wgt = 1 + gamma * av
        num += wgt * -(yv * math.log(q) + (1 - yv) * math.log(1 - q))
        den += wgt
    return num / den if normalize else num


def f_curve_ref(p, y):
    """Per-threshold (precision, recall, F) for one image with P > t binarisation."""
    rows = []
    for k in range(256):
        t = k / 255
        tp = fp = fn = 0
        for pv, yv in zip(p.ravel(), y.ravel()):
            pos = pv > t
            if pos and yv:
                tp += 1
            elif pos:
                fp += 1
            elif yv:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        den = 0.3 * prec + rec
        rows.append((prec, rec, 1.3 * prec * rec / den if den else 0.0))
    return rows


def fmax_ref(preds, gts):
    curves = [f_curve_ref(p, g) for p, g in zip(preds, gts)]
    best = 0.0
    for k in range(256):
        best = max(best, sum(c[k][2] for c in curves) / len(curves))
    return best


def mae_ref(p, y):
    total = 0.0
    for a, b in zip(p.ravel(), y.ravel()):
        total += abs(a - b)
    return total / p.size


def _mean(v):
    return sum(v) / len(v)


def _std1(v):
    if len(v) < 2:
        return 0.0
    m = _mean(v)
    return math.sqrt(sum((a - m) ** 2 for a in v) / (len(v) - 1))


def _obj(v):
    m = _mean(v)
    return 2 * m / (m * m + 1 + _std1(v) + EPS)


def _ssim_block(p, g):
    n = len(p)
    if n == 0:
        return 0.0
    mx, my = _mean(p), _mean(g)
    d = max(n - 1, 1)
    sx = sum((a - mx) ** 2 for a in p) / d
    sy = sum((b - my) ** 2 for b in g) / d
    sxy = sum((a - mx) * (b - my) for a, b in zip(p, g)) / d
    num = 4 * mx * my * sxy
    den = (mx * mx + my * my) * (sx + sy)
    if num != 0:
        return num / (den + EPS)
    return 1.0 if den == 0 else 0.0


def s_measure_ref(p, y):
    h, w = y.shape
    cells = [(i, j) for i in range(h) for j in range(w)]
    fg = [(i, j) for i, j in cells if y[i, j] > 0.5]
    u = len(fg) / len(cells)
    if u == 0:
        return 1 - _mean([p[c] for c in cells])
    if u == 1:
        return _mean([p[c] for c in cells])
    bg = [c for c in cells if y[c] <= 0.5]
    s_obj = u * _obj([p[c] for c in fg]) + (1 - u) * _obj([1 - p[c] for c in bg])
    cy = round(_mean([i for i, _ in fg]))   # python round: half to even, as numpy
    cx = round(_mean([j for _, j in fg]))
    X, Y = cx + 1, cy + 1
    s_reg = 0.0
    for rows, cols in (((0, Y), (0, X)), ((0, Y), (X, w)), ((Y, h), (0, X)), ((Y, h), (X, w))):
        blk = [(i, j) for i in range(*rows) for j in range(*cols)]
        weight = len(blk) / (h * w)
        s_reg += weight * _ssim_block([p[c] for c in blk], [float(y[c] > 0.5) for c in blk])
    return max(0.0, 0.5 * s_obj + 0.5 * s_reg)
