"""Blind degradation synthesis: blur -> downsample -> noise -> JPEG -> upsample.

The pipeline operates on float64 images in [-1, 1] and never changes the
final spatial size (the downsample/upsample pair round-trips).  The JPEG
stage is an in-repo 8x8 block-DCT quantizer using the standard luminance
table; it reproduces blocking/ringing statistics, not codec bytes.

Component notes:
- Gaussian blur: separable, replicate padding, kernel normalized to sum 1.
  sigma == 0 (only sensible with size 1) degenerates to the identity.
- Downsampling: stride-r average pooling by default; bicubic decimation is
  available as a config alternative.
- Bicubic resampling: Catmull-Rom kernel (a = -0.5), center-aligned source
  positions, replicate edges, antialias prefilter when shrinking, output
  clamped to [-1, 1].
- Noise: additive Gaussian with standard deviation given in 8-bit units
  (sigma/127.5 in [-1, 1] units), clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .common import ensure_image
from .errors import ParameterError
from .rng import RandomStream

BICUBIC_A = -0.5

# Standard luminance quantization table (quality 50 baseline).
JPEG_LUMA_QTABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

SEVERE_RANGES = {
    "scale": (8, 16),
    "blur_ksize": (1, 17),
    "blur_sigma": (3.0, 20.0),
    "jpeg_quality": (40, 50),
    "noise_sigma": (30.0, 90.0),
}


@dataclass(frozen=True)
class DegradationConfig:
    """Parameters of one synthesis pass; see SEVERE_RANGES for the blind sweep."""

    blur_ksize: int = 1
    blur_sigma: float = 0.0
    scale: int = 1
    noise_sigma: float = 0.0
    jpeg_quality: int = 100
    downsample_method: str = "pool"  # "pool" | "bicubic"

    def validate(self) -> "DegradationConfig":
        if self.blur_ksize < 1 or self.blur_ksize % 2 == 0:
            raise ParameterError(f"blur_ksize must be odd and >= 1, got {self.blur_ksize}")
        if self.blur_sigma < 0:
            raise ParameterError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.scale < 1:
            raise ParameterError(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ParameterError(f"jpeg_quality must be in [1, 100], got {self.jpeg_quality}")
        if self.downsample_method not in ("pool", "bicubic"):
            raise ParameterError(f"unknown downsample_method {self.downsample_method!r}")
        return self


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"blur kernel size must be odd and >= 1, got {size}")
    if size == 1 or sigma <= 0:
        return np.array([1.0])
    half = size // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    if half == 0:
        return img
    pad = [(0, 0)] * img.ndim
    pad[axis] = (half, half)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate padding."""
    img = ensure_image(img)
    k = gaussian_kernel(size, sigma)
    return _convolve_axis(_convolve_axis(img, k, 0), k, 1)


def cubic_weight(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    w = np.where(
        ax <= 1.0,
        (a + 2.0) * ax**3 - (a + 3.0) * ax**2 + 1.0,
        np.where(ax < 2.0, a * ax**3 - 5.0 * a * ax**2 + 8.0 * a * ax - 4.0 * a, 0.0),
    )
    return w


def _resize_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    if out_len == in_len:
        return img
    # Center-aligned mapping; kernel stretched by the shrink factor (antialias).
    f = max(1.0, in_len / out_len)
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    radius = int(np.ceil(2.0 * f))
    offsets = np.arange(-radius, radius + 1)
    idx = np.floor(src)[:, None] + offsets[None, :]
    w = cubic_weight((idx - src[:, None]) / f)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1).astype(np.int64)
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("ow,ow...->o...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom resize to (out_h, out_w); clamps output to [-1, 1]."""
    img = ensure_image(img)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got ({out_h}, {out_w})")
    out = _resize_axis(_resize_axis(img, out_h, 0), out_w, 1)
    return np.clip(out, -1.0, 1.0)


def upsample_bicubic(img: np.ndarray, r: int) -> np.ndarray:
    """Bicubic upsample by an integer factor r."""
    img = ensure_image(img)
    if r < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {r}")
    if r == 1:
        return img
    return resize_bicubic(img, img.shape[0] * r, img.shape[1] * r)


def downsample(img: np.ndarray, r: int, method: str = "pool") -> np.ndarray:
    """Downsample by an integer factor r that must divide both dimensions."""
    img = ensure_image(img)
    if r < 1:
        raise ParameterError(f"downsample factor must be >= 1, got {r}")
    H, W, C = img.shape
    if H % r or W % r:
        raise ParameterError(f"factor r={r} must divide image size ({H}, {W})")
    if r == 1:
        return img
    if method == "pool":
        return img.reshape(H // r, r, W // r, r, C).mean(axis=(1, 3))
    if method == "bicubic":
        return resize_bicubic(img, H // r, W // r)
    raise ParameterError(f"unknown downsample method {method!r}")


def add_noise(img: np.ndarray, sigma8: float, rng: RandomStream) -> np.ndarray:
    """Additive Gaussian noise with std sigma8 in 8-bit units, clamped."""
    img = ensure_image(img)
    if sigma8 < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma8}")
    if sigma8 == 0:
        return img
    noisy = img + (sigma8 / 127.5) * rng.normal(img.shape)
    return np.clip(noisy, -1.0, 1.0)


def _quality_scaled_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ParameterError(f"jpeg quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA_QTABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization round-trip approximating JPEG at the given quality.

    Applied per channel with the luminance table (no chroma subsampling);
    image sides are replicate-padded up to a multiple of 8 and cropped back.
    """
    img = ensure_image(img)
    table = _quality_scaled_table(quality)
    H, W, C = img.shape
    pad_h = (-H) % 8
    pad_w = (-W) % 8
    work = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    Hp, Wp = work.shape[:2]
    # To 8-bit scale, centered at zero as the codec does.
    pix = (work + 1.0) * 127.5 - 128.0
    blocks = pix.reshape(Hp // 8, 8, Wp // 8, 8, C).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / table) * table
    rec = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    pix = rec.transpose(0, 3, 1, 4, 2).reshape(Hp, Wp, C)
    out = (pix + 128.0) / 127.5 - 1.0
    return np.clip(out[:H, :W], -1.0, 1.0)


def degrade(I_H: np.ndarray, cfg: DegradationConfig, rng: RandomStream,
            stage_hook=None) -> np.ndarray:
    """Full synthesis pass; output has the same spatial size as the input.

    Order is fixed: blur, downsample by r, additive noise, JPEG, upsample
    by r.  ``stage_hook(name, image)`` is invoked after each stage when
    provided (used by the pipeline-order tests).
    """
    img = ensure_image(I_H)
    cfg = cfg.validate()
    if img.shape[0] % cfg.scale or img.shape[1] % cfg.scale:
        raise ParameterError(
            f"scale r={cfg.scale} must divide image size {img.shape[:2]}"
        )

    def emit(name, x):
        if stage_hook is not None:
            stage_hook(name, x)
        return x

    x = emit("blur", gaussian_blur(img, cfg.blur_ksize, cfg.blur_sigma))
    x = emit("downsample", downsample(x, cfg.scale, cfg.downsample_method))
    x = emit("noise", add_noise(x, cfg.noise_sigma, rng))
    x = emit("jpeg", jpeg_compress(x, cfg.jpeg_quality))
    x = emit("upsample", upsample_bicubic(x, cfg.scale))
    return x


def sample_severe_config(rng: RandomStream, downsample_method: str = "pool") -> DegradationConfig:
    """Draw blind-restoration parameters from the documented severe ranges."""
    r = int(rng.integers(*SEVERE_RANGES["scale"]))
    ks_lo, ks_hi = SEVERE_RANGES["blur_ksize"]
    ksize = int(rng.integers(ks_lo // 2, (ks_hi - 1) // 2)) * 2 + 1  # odd in [1, 17]
    sig_lo, sig_hi = SEVERE_RANGES["blur_sigma"]
    sigma = float(sig_lo + (sig_hi - sig_lo) * rng.uniform())
    q = int(rng.integers(*SEVERE_RANGES["jpeg_quality"]))
    n_lo, n_hi = SEVERE_RANGES["noise_sigma"]
    noise = float(n_lo + (n_hi - n_lo) * rng.uniform())
    return DegradationConfig(blur_ksize=ksize, blur_sigma=sigma, scale=r,
                             noise_sigma=noise, jpeg_quality=q,
                             downsample_method=downsample_method)
