"""Image I/O and the geometric augmentations used by the data pipeline.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``,
RGB channel order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import DecodeError, IoError, NotFoundError, RangeError, ShapeError

SUPPORTED_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    size: int


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as an 8-bit RGB file; the format follows the suffix."""
    img = check_image(img)
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"parent directory does not exist: {path.parent}")
    try:
        PILImage.fromarray(to_uint8(img), mode="RGB").save(path)
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _linear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres (align_corners=False), edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the align_corners=False sampling convention."""
    img = check_image(img)
    if out_h < 1 or out_w < 1:
        raise RangeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    src = img.astype(np.float64)
    y0, y1, fy = _linear_taps(h, out_h)
    x0, x1, fx = _linear_taps(w, out_w)
    rows = src[y0] * (1.0 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def paired_random_crop(
    a: np.ndarray, b: np.ndarray, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, CropSpec]:
    """Crop the same square window out of two equally sized images."""
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"paired images differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if size < 1 or size > min(h, w):
        raise RangeError(f"crop size {size} does not fit a {h}x{w} image")
    spec = CropSpec(
        top=int(rng.integers(0, h - size + 1)),
        left=int(rng.integers(0, w - size + 1)),
        size=size,
    )
    return crop(a, spec), crop(b, spec), spec


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> tuple[np.ndarray, CropSpec]:
    patch, _, spec = paired_random_crop(img, img, size, rng)
    return patch, spec


def crop(img: np.ndarray, spec: CropSpec) -> np.ndarray:
    return img[spec.top : spec.top + spec.size, spec.left : spec.left + spec.size].copy()


def flip(img: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    img = check_image(img)
    if horizontal:
        img = img[:, ::-1]
    if vertical:
        img = img[::-1]
    return np.ascontiguousarray(img)


def random_flip_flags(rng: np.random.Generator) -> tuple[bool, bool]:
    """Draw independent horizontal/vertical flip decisions, each with p=0.5."""
    h, v = rng.random(2) < 0.5
    return bool(h), bool(v)
