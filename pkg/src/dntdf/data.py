"""Binary netpbm IO, paired dataset loading, synthetic scenes and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .loss import edge_weight_alpha
from .ops import interp_matrix

IMAGE_EXT = ".ppm"
MASK_EXT = ".pgm"
SCALES = (0.8, 0.9, 1.0, 1.1, 1.2)


class PNMError(ValueError):
    pass


# -- netpbm -------------------------------------------------------------------


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError(f"truncated header at byte {start}")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode a binary P5 (grey) or P6 (RGB) image to an integer array (H, W) or (H, W, 3)."""
    if buf[:2] not in (b"P5", b"P6"):
        raise PNMError(f"bad magic {buf[:2]!r} at byte 0; expected P5 or P6")
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise PNMError(f"invalid {what} {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise PNMError(f"invalid dimensions {w}x{h} or maxval {maxval} in header ending at byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PNMError(f"expected a single whitespace after maxval at byte {pos}")
    pos += 1
    width = 1 if maxval < 256 else 2
    need = w * h * channels * width
    if len(buf) - pos < need:
        raise PNMError(f"raster truncated: need {need} bytes from byte {pos}, file has {len(buf) - pos}")
    dtype = np.uint8 if width == 1 else np.dtype(">u2")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos).astype(np.int64)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    if arr.max(initial=0) > maxval:
        raise PNMError(f"sample exceeds maxval {maxval} in raster starting at byte {pos}")
    return arr, maxval


def read_pnm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    try:
        return decode_pnm(data)
    except PNMError as e:
        raise PNMError(f"{path}: {e}") from None


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot encode array of shape {arr.shape} as P5/P6")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise PNMError("samples must lie in 0..255")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes()


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def to_u8(x: np.ndarray) -> np.ndarray:
    """Round [0, 1] values to 8-bit samples (half up)."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# -- samples ------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray           # (3, h, w) float32 in [0, 1]
    mask: np.ndarray            # (h, w) float32 in {0, 1}
    ident: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, h, w), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}")


def nearest_multiple(n: int, m: int = 32) -> int:
    return max(m, ((2 * n + m) // (2 * m)) * m)


def fit(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Centre-crop or zero-pad the last two axes to (h, w)."""
    out = np.zeros(a.shape[:-2] + (h, w), dtype=a.dtype)
    sh, sw = a.shape[-2:]
    ch, cw = min(h, sh), min(w, sw)
    sy, sx = (sh - ch) // 2, (sw - cw) // 2
    dy, dx = (h - ch) // 2, (w - cw) // 2
    out[..., dy:dy + ch, dx:dx + cw] = a[..., sy:sy + ch, sx:sx + cw]
    return out


def image_from_pnm(arr: np.ndarray, maxval: int) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr.transpose(2, 0, 1) / maxval).astype(np.float32)


def mask_from_pnm(arr: np.ndarray, maxval: int) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr * 255 >= 128 * maxval).astype(np.float32)


def _listing(d, ext) -> dict[str, Path]:
    return {p.stem: p for p in sorted(Path(d).iterdir()) if p.suffix.lower() in (ext, ".pnm")}


def load_images(image_dir) -> list[tuple[str, np.ndarray]]:
    out = []
    for ident, path in _listing(image_dir, IMAGE_EXT).items():
        img = image_from_pnm(*read_pnm(path))
        h, w = img.shape[1:]
        out.append((ident, fit(img, nearest_multiple(h), nearest_multiple(w))))
    return out


def load_masks(mask_dir) -> dict[str, np.ndarray]:
    return {ident: mask_from_pnm(*read_pnm(p)) for ident, p in _listing(mask_dir, MASK_EXT).items()}


def load_maps(directory) -> dict[str, np.ndarray]:
    """Grey saliency maps scaled to [0, 1] without thresholding."""
    out = {}
    for ident, path in _listing(directory, MASK_EXT).items():
        arr, maxval = read_pnm(path)
        out[ident] = arr.astype(np.float64) / maxval
    return out


def load_samples(image_dir, mask_dir) -> list[Sample]:
    """Pair images and masks by basename, sorted by identifier."""
    images = _listing(image_dir, IMAGE_EXT)
    masks = _listing(mask_dir, MASK_EXT)
    for ident in sorted(set(images) ^ set(masks)):
        side = "mask" if ident in images else "image"
        raise FileNotFoundError(f"no {side} found for basename {ident!r}")
    samples = []
    for ident in sorted(images):
        img = image_from_pnm(*read_pnm(images[ident]))
        mask = mask_from_pnm(*read_pnm(masks[ident]))
        if mask.shape != img.shape[1:]:
            raise ValueError(f"{ident}: mask {mask.shape} and image {img.shape[1:]} differ in size")
        h, w = nearest_multiple(mask.shape[0]), nearest_multiple(mask.shape[1])
        samples.append(Sample(fit(img, h, w), fit(mask, h, w), ident))
    return samples


def save_samples(samples: Sequence[Sample], out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pnm(out / "images" / f"{s.ident}{IMAGE_EXT}", to_u8(s.image.transpose(1, 2, 0)))
        write_pnm(out / "masks" / f"{s.ident}{MASK_EXT}", (s.mask > 0.5).astype(np.uint8) * 255)


# -- synthetic scenes ---------------------------------------------------------


def _smooth_field(rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.random((cells, cells))
    a = interp_matrix(cells, size)
    return a @ coarse @ a.T


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.1, 0.3, 2) * size
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def synth_sample(size: int, seed: int, index: int, delta: int = 10) -> Sample:
    """One scene: 1-3 saturated shapes over a low-frequency grey background."""
    if size % 32:
        raise ValueError(f"synthetic size must be a multiple of 32, got {size}")
    rng = np.random.default_rng([seed, index])
    while True:
        mask = np.zeros((size, size), bool)
        shapes = []
        for _ in range(rng.integers(1, 4)):
            m = _shape_mask(rng, size)
            shapes.append(m)
            mask |= m
        frac = mask.mean()
        if 0.05 <= frac <= 0.6 and (edge_weight_alpha(mask, delta) == 0).any():
            break
    grey = 0.25 + 0.5 * _smooth_field(rng, size)
    tint = 0.06 * (_smooth_field(rng, size, 3)[None] - 0.5) * rng.uniform(-1, 1, (3, 1, 1))
    image = np.clip(grey[None] + tint, 0.0, 1.0)
    for m in shapes:
        color = _hsv_to_rgb(rng.random(), rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0))
        shade = 0.9 + 0.1 * _smooth_field(rng, size, 3)
        image = np.where(m[None], color[:, None, None] * shade[None], image)
    image = image + rng.normal(0.0, 0.02, image.shape)
    image = to_u8(image).astype(np.float32) / 255.0
    return Sample(image, mask.astype(np.float32), f"synth_{seed}_{index:05d}")


def synth_generate(n: int, size: int = 64, seed: int = 0, start: int = 0) -> list[Sample]:
    """Deterministic in (seed, index): sample k is the same whatever ``n`` is."""
    return [synth_sample(size, seed, start + k) for k in range(n)]


# -- augmentation -------------------------------------------------------------


def flip_horizontal(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def rescale(sample: Sample, scale: float) -> Sample:
    """Resize by ``scale`` (bilinear image, nearest mask), then crop/pad back to the original size."""
    h, w = sample.mask.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        return sample
    ah, aw = interp_matrix(h, nh), interp_matrix(w, nw)
    image = (ah @ sample.image.astype(np.float64) @ aw.T).astype(np.float32)
    mask = sample.mask[nearest_index(h, nh)][:, nearest_index(w, nw)]
    return replace(sample, image=fit(image, h, w), mask=fit(mask, h, w))


def augment(sample: Sample, rng: np.random.Generator, flip: bool = True,
            scales: Sequence[float] = SCALES) -> Sample:
    if flip and rng.random() < 0.5:
        sample = flip_horizontal(sample)
    if scales:
        sample = rescale(sample, float(scales[rng.integers(len(scales))]))
    return sample
