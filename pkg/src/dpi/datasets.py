"""Procedural desk-scale datasets: toy faces and Gaussian pixel data.

Toy faces are 32x32 single-channel images in [-1, 1]: an elliptical head
on a dark background, two eye blobs and a mouth bar, all with randomized
positions and intensities, lightly blurred so edges carry sub-pixel
structure.  Everything is generated in-repo from keyed streams; nothing
is downloaded.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .degradation import gaussian_blur
from .errors import DataError, ParameterError
from .pnm import read_image, write_image
from .rng import RandomStream, stream

FACE_SIZE = 32


def _soft_disk(xx, yy, cx, cy, rx, ry, sharp=4.0):
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    return np.clip((1.0 - d) * sharp, 0.0, 1.0)


def make_face(rng: RandomStream, size: int = FACE_SIZE) -> np.ndarray:
    """One randomized face-like image, shape (size, size, 1)."""
    u = rng.uniform(16)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.full((size, size), -0.9 + 0.15 * u[0])

    cx = size * (0.5 + 0.12 * (u[1] - 0.5))
    cy = size * (0.5 + 0.12 * (u[2] - 0.5))
    rx = size * (0.26 + 0.10 * u[3])
    ry = size * (0.32 + 0.10 * u[4])
    head = 0.25 + 0.5 * u[5]
    m = _soft_disk(xx, yy, cx, cy, rx, ry)
    img = img * (1 - m) + head * m

    eye_dx = rx * (0.40 + 0.12 * u[6])
    eye_dy = ry * (0.25 + 0.10 * u[7])
    eye_r = size * (0.045 + 0.02 * u[8])
    eye_val = -0.55 - 0.35 * u[9]
    for side, jx, jy in ((-1, u[10], u[11]), (+1, u[12], u[13])):
        ex = cx + side * eye_dx + (jx - 0.5) * 1.5
        ey = cy - eye_dy + (jy - 0.5) * 1.5
        m = _soft_disk(xx, yy, ex, ey, eye_r, eye_r, sharp=3.0)
        img = img * (1 - m) + eye_val * m

    mouth_w = rx * (0.45 + 0.2 * u[14])
    mouth_y = cy + ry * 0.45
    m = _soft_disk(xx, yy, cx, mouth_y, mouth_w, size * 0.035, sharp=3.0)
    img = img * (1 - m) + (-0.35 - 0.3 * u[15]) * m

    img = gaussian_blur(img[:, :, None], 3, 0.6)
    return np.clip(img, -1.0, 1.0)


def make_face_dataset(count: int, seed: int, size: int = FACE_SIZE) -> list:
    return [make_face(stream(seed, "face", i), size) for i in range(count)]


def make_gaussian_dataset(mu0: np.ndarray, var0: np.ndarray, count: int,
                          seed: int) -> list:
    """Pixelwise N(mu0, var0) draws; the matching law for the oracle denoiser."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    if np.any(var0 <= 0):
        raise ParameterError("var0 must be positive everywhere")
    s = stream(seed, "gaussian-data")
    return [mu0 + np.sqrt(var0) * s.child(i).normal(mu0.shape) for i in range(count)]


def write_image_dir(out_dir, images: list, manifest_lines: list[str]) -> list[Path]:
    """Write images as zero-padded PGM/PPM files plus a manifest.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        ext = "pgm" if img.shape[2] == 1 else "ppm"
        p = out / f"{i:05d}.{ext}"
        write_image(img, p)
        paths.append(p)
    (out / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    return paths


def load_image_dir(path) -> list[np.ndarray]:
    """Read every PGM/PPM in a directory, sorted by name."""
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"not a directory: {p}")
    files = sorted(list(p.glob("*.pgm")) + list(p.glob("*.ppm")))
    if not files:
        raise DataError(f"no PGM/PPM images under {p}")
    return [read_image(f) for f in files]
