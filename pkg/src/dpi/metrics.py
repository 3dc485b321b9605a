"""Full-reference quality metrics and the grid-restricted consistency MSE.

Metrics operate on the luminance channel, interpreted on the 8-bit scale
(values in [-1, 1] are mapped through (x + 1) * 127.5 without rounding, so
MAX = 255).  PSNR of identical images is reported as a 99 dB sentinel.

SSIM uses an 11x11 Gaussian window (sigma 1.5) with C1 = (0.01 * 255)^2 and
C2 = (0.03 * 255)^2, averaged over windows that fit entirely inside the
image; these constants are fixed so numbers are comparable across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import ensure_image, luminance
from .errors import ParameterError
from .masks import FixedMask

PSNR_SENTINEL_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def _to_8bit_luma(img: np.ndarray) -> np.ndarray:
    return (luminance(img) + 1.0) * 127.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(255^2 / MSE) on luminance; 99 dB sentinel when identical."""
    a8 = _to_8bit_luma(a)
    b8 = _to_8bit_luma(b)
    if a8.shape != b8.shape:
        raise ParameterError(f"shape mismatch: {a8.shape} vs {b8.shape}")
    mse = float(np.mean((a8 - b8) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL_DB
    return float(min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_SENTINEL_DB))


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Valid-mode weighted local means via accumulated shifts; images here are
    # small enough that the k^2 slice loop beats an FFT round-trip.
    k = w.shape[0]
    H, W = img.shape
    out = np.zeros((H - k + 1, W - k + 1))
    for i in range(k):
        for j in range(k):
            out += w[i, j] * img[i:i + H - k + 1, j:j + W - k + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over luminance; requires at least an 11x11 image."""
    a8 = _to_8bit_luma(a)
    b8 = _to_8bit_luma(b)
    if a8.shape != b8.shape:
        raise ParameterError(f"shape mismatch: {a8.shape} vs {b8.shape}")
    if min(a8.shape) < SSIM_WINDOW:
        raise ParameterError(f"image too small for SSIM window {SSIM_WINDOW}: {a8.shape}")
    w = _ssim_window()
    mu_a = _windowed_mean(a8, w)
    mu_b = _windowed_mean(b8, w)
    var_a = _windowed_mean(a8 * a8, w) - mu_a * mu_a
    var_b = _windowed_mean(b8 * b8, w) - mu_b * mu_b
    cov = _windowed_mean(a8 * b8, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def grid_mse(sr: np.ndarray, gt: np.ndarray, fm: FixedMask) -> float:
    """MSE restricted to the fixed-grid support, averaged over channels."""
    sr = ensure_image(sr, "sr")
    gt = ensure_image(gt, "gt")
    if sr.shape != gt.shape:
        raise ParameterError(f"shape mismatch: {sr.shape} vs {gt.shape}")
    if fm.mask.shape != sr.shape[:2]:
        raise ParameterError(f"mask {fm.mask.shape} does not match image {sr.shape[:2]}")
    support = fm.mask > 0.5
    n = int(support.sum())
    if n == 0:
        raise ParameterError("grid mask has empty support")
    diff = (sr - gt)[support]
    return float(np.mean(diff * diff))


@dataclass
class MetricReport:
    """Per-image rows plus arithmetic-mean aggregates."""

    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, **values: float) -> None:
        self.rows.append({"name": name, **values})

    def aggregate(self) -> dict:
        if not self.rows:
            return {}
        keys = [k for k in self.rows[0] if k != "name"]
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def write_csv(self, path) -> None:
        keys = [k for k in (self.rows[0] if self.rows else {}) if k != "name"]
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name"] + keys)
            for r in self.rows:
                writer.writerow([r["name"]] + [f"{r[k]:.10g}" for k in keys])
            agg = self.aggregate()
            if agg:
                writer.writerow(["aggregate"] + [f"{agg[k]:.10g}" for k in keys])
