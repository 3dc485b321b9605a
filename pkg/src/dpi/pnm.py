"""Binary PGM (P5) / PPM (P6) image I/O, 8-bit only.

Pixels map to reals via v / 127.5 - 1 on read and
round(clamp(x, -1, 1) * 127.5 + 127.5) on write, so a write/read
round-trip is exact at 8-bit resolution.  These formats are trivially
byte-reproducible, which the determinism contract relies on.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .common import ensure_image, to_bytes, to_unit_range
from .errors import DataError

_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    for _ in range(count):
        m = _TOKEN.match(data[pos:])
        if not m:
            raise DataError("truncated PNM header")
        tokens.append(m.group(1))
        pos += m.end()
    return tokens, pos


def read_image(path) -> np.ndarray:
    """Read a P5/P6 file into an (H, W, C) float64 array in [-1, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, pos = _read_tokens(data, 4)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit (maxval 255) files are supported")
    payload = data[pos + 1:]  # single whitespace byte after maxval
    expected = width * height * channels
    if len(payload) < expected:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8)
    return to_unit_range(pixels.reshape(height, width, channels))


def write_image(img: np.ndarray, path) -> None:
    """Write an (H, W, 1) array as PGM or (H, W, 3) as PPM."""
    img = ensure_image(img)
    data = to_bytes(img)
    path = Path(path)
    magic = b"P5" if img.shape[2] == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0])
    path.write_bytes(header + data.tobytes())


def write_pgm_bytes(gray: np.ndarray, path) -> None:
    """Write a 2-D uint8 array as a PGM without any value mapping."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DataError(f"expected 2-D array for PGM export, got {gray.shape}")
    header = b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0])
    Path(path).write_bytes(header + gray.tobytes())
