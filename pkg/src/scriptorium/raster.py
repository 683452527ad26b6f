"""Small raster helpers shared by the layout, geometry and OCR stages.

All pipeline code works on 2-D float32 arrays in [0, 1] with 1.0 = paper
white and 0.0 = ink black.  File I/O goes through Pillow; colour images
are reduced to luminance.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def to_gray01(image: np.ndarray) -> np.ndarray:
    """Convert an image array to a (H, W) float32 array in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = arr.astype(np.float64) @ _LUMA
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32)
        if arr.size and arr.max() > 1.5:
            arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def median_border(image: np.ndarray) -> float:
    """Median intensity of the 1-pixel border ring (page background estimate)."""
    a = np.asarray(image)
    if a.size == 0:
        return 1.0
    if a.shape[0] < 3 or a.shape[1] < 3:
        return float(np.median(a))
    ring = np.concatenate([a[0, :], a[-1, :], a[1:-1, 0], a[1:-1, -1]])
    return float(np.median(ring))


def resize(image: np.ndarray, out_h: int, out_w: int, order: int = 1) -> np.ndarray:
    """Resample to (out_h, out_w) with pixel-center alignment."""
    a = np.asarray(image, dtype=np.float64)
    h, w = a.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if (out_h, out_w) == (h, w):
        return a.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(a, grid, order=order, mode="nearest")
    return out.astype(np.float32)


def load_image(path: str | Path) -> np.ndarray:
    """Read PNG/JPEG as grayscale float in [0, 1] (RGB reduced by luminance)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "I;16", "F"):
            img = img.convert("L")
        return to_gray01(np.asarray(img))


def save_png(path: str | Path, image01: np.ndarray) -> None:
    arr = np.clip(np.asarray(image01), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")
