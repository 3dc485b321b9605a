"""Small shared helpers: image validation, luminance, 8-bit mapping."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

# BT.601 luma weights, used everywhere a color image is reduced to one channel.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def ensure_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, C) image array and return it as float64."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ParameterError(f"{name}: expected (H, W, C) array, got shape {arr.shape}")
    if a.shape[2] not in (1, 3):
        raise ParameterError(f"{name}: channel count must be 1 or 3, got {a.shape[2]}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ParameterError(f"{name}: empty image {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError(f"{name}: contains non-finite values")
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def luminance(img: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H, W); identity for single-channel input."""
    img = ensure_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


def to_unit_range(bytes_img: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values to reals in [-1, 1]: v / 127.5 - 1."""
    return np.asarray(bytes_img, dtype=np.float64) / 127.5 - 1.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map reals to 8-bit: round(clamp(x, -1, 1) * 127.5 + 127.5)."""
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round(x * 127.5 + 127.5).astype(np.uint8)
