"""Frame preprocessing and deterministic dataset augmentation.

Gray images are 2-D ``uint8`` arrays (height, width).  Masks use the same
type with values {0, 255}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ImageFormatError
from .rng import PCG32, sample_key

PROCESSING_SIZE = (224, 224)

GEOMETRIC_OPS = ("hflip", "vflip", "shift_right", "shift_left", "shift_down", "shift_up")
NOISE_OP = "noise"

DEFAULT_PLAN = (
    (),
    ("hflip",),
    ("vflip",),
    ("hflip", "vflip"),
    ("shift_right",),
    ("shift_left",),
    ("shift_down",),
    ("shift_up",),
    ("shift_right", "hflip"),
    ("noise",),
    ("hflip", "noise"),
)


def _round_half_up(values) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def _to_u8(values) -> np.ndarray:
    return np.clip(_round_half_up(values), 0, 255).astype(np.uint8)


def to_grayscale(rgb) -> np.ndarray:
    """BT.601 luma, rounded half-up. 2-D input is returned as a copy."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.uint8, copy=True)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"expected an HxWx3 RGB image, got shape {rgb.shape}")
    r, g, b = (rgb[..., i].astype(np.int64) for i in range(3))
    # integer form of floor(0.299 R + 0.587 G + 0.114 B + 0.5)
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


def _sample_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear_float(img, size) -> np.ndarray:
    """Bilinear resample to ``size = (width, height)`` with half-pixel centers, no rounding."""
    w_out, h_out = size
    if w_out < 1 or h_out < 1:
        raise DataError(f"resize target must be positive, got {w_out}x{h_out}")
    src = np.asarray(img, dtype=np.float64)
    h_in, w_in = src.shape
    y0, y1, fy = _sample_axis(h_in, h_out)
    x0, x1, fx = _sample_axis(w_in, w_out)
    rows = src[y0] * (1 - fy)[:, None] + src[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def resize_bilinear(img, size) -> np.ndarray:
    """Resize a gray image to ``size = (width, height)``."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ImageFormatError(f"resize expects a 2-D gray image, got shape {img.shape}")
    if (img.shape[1], img.shape[0]) == tuple(size):
        return img.astype(np.uint8, copy=True)
    return _to_u8(resize_bilinear_float(img, size))


def resize_mask(mask, size) -> np.ndarray:
    """Bilinear resize followed by a 50% cut, so the result stays in {0, 255}."""
    return np.where(resize_bilinear_float(np.asarray(mask) > 0, size) >= 0.5, 255, 0).astype(np.uint8)


def normalize(img) -> np.ndarray:
    """Gray image -> (1, 1, H, W) float32 tensor in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ImageFormatError(f"normalize expects a 2-D gray image, got shape {img.shape}")
    return (img.astype(np.float32) / np.float32(255.0))[None, None]


def denormalize(t) -> np.ndarray:
    """Inverse of :func:`normalize` for a (1, 1, H, W) tensor."""
    t = np.asarray(t)
    return _to_u8(t.reshape(t.shape[-2:]).astype(np.float64) * 255.0)


def preprocess(img, size=PROCESSING_SIZE) -> np.ndarray:
    """Any decoded frame -> gray ``uint8`` at the processing resolution."""
    return resize_bilinear(to_grayscale(img), size)


def hflip(img) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def vflip(img) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[::-1, :])


def shift(img, dx: int, dy: int) -> np.ndarray:
    """Translate by (dx, dy) pixels (right/down positive), zero-filling exposed borders."""
    img = np.asarray(img)
    h, w = img.shape
    out = np.zeros_like(img)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def add_noise(img, sigma: float, rng: PCG32) -> np.ndarray:
    """Additive Gaussian noise, ``sigma`` as a fraction of the 0..255 range."""
    img = np.asarray(img)
    z = rng.normals(img.size).reshape(img.shape)
    return _to_u8(img.astype(np.float64) + sigma * 255.0 * z)


@dataclass(frozen=True)
class AugmentConfig:
    shift_fraction: float = 0.10
    noise_sigma: float = 0.05
    plan: tuple[tuple[str, ...], ...] = DEFAULT_PLAN

    def __post_init__(self):
        if len(self.plan) < 10:
            raise ValueError(f"augmentation plan must yield at least 10 variants, got {len(self.plan)}")
        if tuple(self.plan[0]) != ():
            raise ValueError("the first plan entry must be the untouched original ()")
        for combo in self.plan:
            for op in combo:
                if op not in GEOMETRIC_OPS and op != NOISE_OP:
                    raise ValueError(f"unknown augmentation op {op!r}")
            if NOISE_OP in combo and list(combo).index(NOISE_OP) != len(combo) - 1:
                raise ValueError(f"noise must come after geometric ops in {combo}")
        if not 0 <= self.shift_fraction < 1 or self.noise_sigma < 0:
            raise ValueError("shift_fraction must be in [0, 1) and noise_sigma non-negative")


def _geometric(img, op: str, cfg: AugmentConfig) -> np.ndarray:
    h, w = img.shape
    dx = int(_round_half_up(cfg.shift_fraction * w))
    dy = int(_round_half_up(cfg.shift_fraction * h))
    if op == "hflip":
        return hflip(img)
    if op == "vflip":
        return vflip(img)
    if op == "shift_right":
        return shift(img, dx, 0)
    if op == "shift_left":
        return shift(img, -dx, 0)
    if op == "shift_down":
        return shift(img, 0, dy)
    if op == "shift_up":
        return shift(img, 0, -dy)
    raise ValueError(f"unknown geometric op {op!r}")


def augment(image, mask=None, cfg: AugmentConfig = AugmentConfig(), seed: int = 0, sample_id=0):
    """Expand one sample into ``len(cfg.plan)`` (image, mask) variants.

    Geometric ops hit image and mask alike; noise touches the image only.
    Noise draws come from a PCG32 stream seeded with ``seed ^ key(sample_id)``
    and are consumed in plan order, so results do not depend on which other
    samples were processed or in what order.
    """
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ImageFormatError(f"augment expects a 2-D gray image, got shape {image.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.uint8)
        if mask.shape != image.shape:
            raise DataError(f"mask dims {mask.shape} differ from image dims {image.shape}")

    rng = PCG32.from_seed(seed ^ sample_key(sample_id))
    variants = []
    for combo in cfg.plan:
        img, msk = image, mask
        for op in combo:
            if op == NOISE_OP:
                img = add_noise(img, cfg.noise_sigma, rng)
            else:
                img = _geometric(img, op, cfg)
                if msk is not None:
                    msk = _geometric(msk, op, cfg)
        variants.append((img.copy(), None if msk is None else msk.copy()))
    return variants
