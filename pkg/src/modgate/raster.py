"""Shared RGBA raster helpers.

Every image in the system is an H x W x 4 uint8 array (RGBA, alpha 255
unless the raster is a logo). Grayscale conversion uses BT.601 luma.
"""
from __future__ import annotations

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def ensure_rgba(pixels: np.ndarray) -> np.ndarray:
    """Coerce an HxW, HxWx3 or HxWx4 uint8 array to HxWx4 (alpha 255)."""
    a = np.asarray(pixels)
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 2:
        a = np.stack([a, a, a], axis=-1)
    if a.ndim != 3 or a.shape[2] not in (3, 4):
        raise ValueError(f"expected HxW[x3|x4] raster, got shape {a.shape}")
    if a.shape[2] == 3:
        alpha = np.full(a.shape[:2] + (1,), 255, dtype=np.uint8)
        a = np.concatenate([a, alpha], axis=2)
    return a


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """BT.601 luma as float64, shape HxW. Ignores alpha."""
    rgb = np.asarray(pixels)[..., :3].astype(np.float64)
    return rgb @ LUMA_WEIGHTS


def alpha_bbox(rgba: np.ndarray, threshold: float = 0.0) -> tuple[int, int, int, int] | None:
    """Half-open (x_min, y_min, x_max, y_max) of pixels with alpha > threshold.

    Returns None when no pixel qualifies.
    """
    mask = np.asarray(rgba)[..., 3] > threshold
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1
