"""Saliency evaluation: max F-measure with PR samples, MAE and S-measure."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError

BETA2 = 0.3
THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
_EPS = np.spacing(1)


def _pairs(pred, gt) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        pred, gt = [pred], [gt]
    out = []
    for p, g in zip(pred, gt, strict=True):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} and mask {g.shape} differ in shape")
        out.append((p, g > 0.5))
    return out


def _counts(p: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """True / false positives of ``p > t`` for every threshold, plus the positive count."""
    fg = np.sort(p[g])
    bg = np.sort(p[~g])
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="right")
    fp = bg.size - np.searchsorted(bg, THRESHOLDS, side="right")
    return tp, fp, int(fg.size)


def _pr_f(tp: np.ndarray, fp: np.ndarray, n_pos) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = tp.astype(np.float64)
    pred_pos = tp + fp
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_pos > 0, tp / np.where(pred_pos > 0, pred_pos, 1), 1.0)
        rec = np.where(n_pos > 0, tp / max(n_pos, 1), 1.0) * np.ones_like(tp)
        den = BETA2 * prec + rec
        f = np.where(den > 0, (1 + BETA2) * prec * rec / np.where(den > 0, den, 1), 0.0)
    return prec, rec, f


@dataclass
class FMeasure:
    fmax: float
    precision: np.ndarray
    recall: np.ndarray
    fscores: np.ndarray
    mode: str

    @property
    def best_threshold(self) -> float:
        return float(THRESHOLDS[int(np.argmax(self.fscores))])


def f_measure_max(pred, gt, mode: str = "per-image") -> FMeasure:
    """Maximum F_beta (beta^2 = 0.3) over thresholds k/255, binarising with ``P > t``.

    ``per-image`` averages each image's F curve before taking the max;
    ``pooled`` accumulates TP/FP/FN over the whole set first.
    """
    pairs = _pairs(pred, gt)
    if not pairs:
        raise ValueError("f_measure_max needs at least one image")
    if mode == "per-image":
        curves = [_pr_f(*_counts(p, g)) for p, g in pairs]
        prec = np.mean([c[0] for c in curves], axis=0)
        rec = np.mean([c[1] for c in curves], axis=0)
        f = np.mean([c[2] for c in curves], axis=0)
    elif mode == "pooled":
        tp = np.zeros(THRESHOLDS.size, np.int64)
        fp = np.zeros(THRESHOLDS.size, np.int64)
        n_pos = 0
        for p, g in pairs:
            a, b, n = _counts(p, g)
            tp += a
            fp += b
            n_pos += n
        prec, rec, f = _pr_f(tp, fp, n_pos)
    else:
        raise ValueError(f"unknown F-measure mode {mode!r}")
    return FMeasure(float(f.max()), prec, rec, f, mode)


def mae(pred, gt) -> float:
    pairs = _pairs(pred, gt)
    if not pairs:
        raise ValueError("mae needs at least one image")
    return float(np.mean([np.mean(np.abs(p - g)) for p, g in pairs]))


# -- S-measure ----------------------------------------------------------------


def _s_object(x: np.ndarray) -> float:
    mean = float(np.mean(x))
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + _EPS)


def _object_score(p: np.ndarray, g: np.ndarray) -> float:
    u = float(np.mean(g))
    return u * _s_object(p[g]) + (1.0 - u) * _s_object(1.0 - p[~g])


def _centroid(g: np.ndarray) -> tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    y, x = np.argwhere(g).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    g = g.astype(np.float64)
    x, y = p.mean(), g.mean()
    d = max(n - 1, 1)
    sx = np.sum((p - x) ** 2) / d
    sy = np.sum((g - y) ** 2) / d
    sxy = np.sum((p - x) * (g - y)) / d
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + _EPS))
    return 1.0 if b == 0 else 0.0


def _region_score(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1.0 - w1 - w2 - w3
    return (w1 * _ssim(p[:y, :x], g[:y, :x]) + w2 * _ssim(p[:y, x:], g[:y, x:])
            + w3 * _ssim(p[y:, :x], g[y:, :x]) + w4 * _ssim(p[y:, x:], g[y:, x:]))


def s_measure_single(p: np.ndarray, g: np.ndarray, alpha: float = 0.5) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g) > 0.5
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and mask {g.shape} differ in shape")
    fg = float(np.mean(g))
    if fg == 0:
        return float(1.0 - np.mean(p))
    if fg == 1:
        return float(np.mean(p))
    s = alpha * _object_score(p, g) + (1 - alpha) * _region_score(p, g)
    return max(0.0, float(s))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure (object + region terms), averaged over images."""
    pairs = _pairs(pred, gt)
    if not pairs:
        raise ValueError("s_measure needs at least one image")
    return float(np.mean([s_measure_single(p, g, alpha) for p, g in pairs]))


# -- report -----------------------------------------------------------------


@dataclass
class MetricReport:
    fmax: float
    mae: float
    s_measure: float
    precision: np.ndarray
    recall: np.ndarray
    n_images: int
    mode: str = "per-image"
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"fmax: {self.fmax:.6f}", f"mae: {self.mae:.6f}", f"s_measure: {self.s_measure:.6f}",
                 f"images: {self.n_images}", f"fmax_mode: {self.mode}", f"thresholds: {THRESHOLDS.size}"]
        lines += [f"{k}: {v}" for k, v in self.extra.items()]
        return "\n".join(lines) + "\n"

    def pr_csv(self) -> str:
        rows = ["threshold,precision,recall"]
        rows += [f"{t:.6f},{p:.6f},{r:.6f}" for t, p, r in zip(THRESHOLDS, self.precision, self.recall)]
        return "\n".join(rows) + "\n"

    @classmethod
    def parse(cls, text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if ":" in line:
                k, v = line.split(":", 1)
                out[k.strip()] = v.strip()
        return out


def metric_report(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], mode: str = "per-image") -> MetricReport:
    fm = f_measure_max(pred, gt, mode)
    return MetricReport(fm.fmax, mae(pred, gt), s_measure(pred, gt), fm.precision, fm.recall,
                        len(_pairs(pred, gt)), mode)
