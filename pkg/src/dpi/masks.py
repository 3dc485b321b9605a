"""Grid condition masks, condition projection, and edge-adaptive mask draws.

The fixed mask m_f keeps every k-th row/column intersection; the initial
condition y_T scatters a reduced-resolution image onto that grid and is
zero elsewhere.  Backtracking reads the grid back out.  The adaptive mask
m_a keeps each grid position independently with probability p^s, where p
is a min-max normalized Laplacian edge response of the backtracked
condition: flat regions are dropped, edges are kept.

Masks are single-channel (H, W) and broadcast across image channels.
All draws consume an explicit RandomStream, so parallel callers own
disjoint streams and a fresh mask is produced at every sampling step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import ensure_image, luminance
from .errors import ParameterError
from .rng import RandomStream

# Four-neighbor Laplacian stencil, applied with replicate padding.
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0],
                             [1.0, -4.0, 1.0],
                             [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class FixedMask:
    """Binary grid mask: 1 exactly where i mod k == 0 and j mod k == 0."""

    mask: np.ndarray
    k: int

    @property
    def popcount(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class AdaptiveMask:
    """One Bernoulli(p^s) draw on the grid; support contained in m_f."""

    mask: np.ndarray
    seed: int

    @property
    def popcount(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-grid-cell keep probabilities in [0, 1], shape (H/k, W/k)."""

    p: np.ndarray


@dataclass(frozen=True)
class Condition:
    """Full-resolution condition image supported on the m_f grid.

    role is "initial" for y_T built from the degraded input and
    "intermediate" for corrector outputs produced during sampling.
    """

    values: np.ndarray
    role: str = "initial"

    def check_support(self, fm: FixedMask) -> None:
        off_grid = self.values * (1.0 - fm.mask)[:, :, None]
        if np.any(off_grid != 0.0):
            raise ParameterError("condition has nonzero values off the fixed grid")


def _check_stride(H: int, W: int, k: int) -> int:
    k = int(k)
    if k < 1:
        raise ParameterError(f"stride k must be >= 1, got {k}")
    if H % k or W % k:
        raise ParameterError(f"stride k={k} must divide image size ({H}, {W})")
    return k


def make_fixed_mask(H: int, W: int, k: int) -> FixedMask:
    """Grid mask with ceil(H/k) * ceil(W/k) ones (exact since k | H, W)."""
    k = _check_stride(H, W, k)
    mask = np.zeros((H, W), dtype=np.float64)
    mask[::k, ::k] = 1.0
    mask.setflags(write=False)
    return FixedMask(mask=mask, k=k)


def project_initial_condition(I_L_bc: np.ndarray, fm: FixedMask) -> Condition:
    """Scatter the (H/k, W/k) base condition onto the grid; zeros elsewhere."""
    I_L_bc = ensure_image(I_L_bc, "base condition")
    H, W = fm.mask.shape
    k = fm.k
    if I_L_bc.shape[0] != H // k or I_L_bc.shape[1] != W // k:
        raise ParameterError(
            f"base condition {I_L_bc.shape[:2]} does not match grid ({H // k}, {W // k})"
        )
    values = np.zeros((H, W, I_L_bc.shape[2]), dtype=np.float64)
    values[::k, ::k, :] = I_L_bc
    return Condition(values=values, role="initial")


def backtrack(y: np.ndarray | Condition, k: int) -> np.ndarray:
    """Read grid positions (k*i, k*j) back to reduced resolution."""
    values = y.values if isinstance(y, Condition) else y
    values = ensure_image(values, "condition")
    _check_stride(values.shape[0], values.shape[1], k)
    return values[::k, ::k, :]


def laplacian_response(gray: np.ndarray) -> np.ndarray:
    """|four-neighbor Laplacian| of a 2-D array with replicate padding."""
    padded = np.pad(gray, 1, mode="edge")
    resp = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2]
            + padded[1:-1, 2:] - 4.0 * padded[1:-1, 1:-1])
    return np.abs(resp)


def edge_probability_map(y_b: np.ndarray) -> ProbabilityMap:
    """Min-max normalized Laplacian magnitude of the backtracked condition.

    Multichannel inputs are reduced to luminance first.  A constant input
    has no edges and maps to p == 0 everywhere.
    """
    gray = luminance(y_b)
    resp = laplacian_response(gray)
    lo = float(resp.min())
    hi = float(resp.max())
    if hi <= lo:
        return ProbabilityMap(p=np.zeros_like(resp))
    return ProbabilityMap(p=(resp - lo) / (hi - lo))


def bernoulli_mask(p: ProbabilityMap | np.ndarray, fm: FixedMask, s: float,
                   rng: RandomStream) -> AdaptiveMask:
    """Independent Bernoulli(p^s) draw at every grid position of m_f.

    Exactly one uniform per grid cell is consumed regardless of p, so for a
    fixed stream the drawn mask is pointwise non-increasing in s.
    """
    if s <= 0:
        raise ParameterError(f"probability exponent s must be > 0, got {s}")
    probs = p.p if isinstance(p, ProbabilityMap) else np.asarray(p, dtype=np.float64)
    H, W = fm.mask.shape
    k = fm.k
    if probs.shape != (H // k, W // k):
        raise ParameterError(
            f"probability map {probs.shape} does not match grid ({H // k}, {W // k})"
        )
    u = rng.uniform(probs.shape)
    keep = (u < probs ** float(s)).astype(np.float64)
    mask = np.zeros((H, W), dtype=np.float64)
    mask[::k, ::k] = keep
    mask.setflags(write=False)
    return AdaptiveMask(mask=mask, seed=rng.seed)


def mask_gen(y_t: np.ndarray | Condition, k: int, s: float, rng: RandomStream) -> AdaptiveMask:
    """Draw the edge-adaptive mask for the current condition.

    backtrack -> Laplacian probability map -> Bernoulli(p^s) on the grid.
    A fresh mask is drawn on every call; determinism comes entirely from
    the supplied stream.
    """
    values = y_t.values if isinstance(y_t, Condition) else y_t
    values = ensure_image(values, "condition")
    fm = make_fixed_mask(values.shape[0], values.shape[1], k)
    y_b = backtrack(values, k)
    p = edge_probability_map(y_b)
    return bernoulli_mask(p, fm, s, rng)


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Export a binary mask as an 8-bit PGM (0/255) for inspection."""
    from .pnm import write_pgm_bytes

    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    write_pgm_bytes(data, path)
