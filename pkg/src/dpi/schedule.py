"""Noise schedules and the unconditional forward/reverse diffusion math.

Conventions used throughout the package:

- Timesteps are 1-indexed: t runs over 1..T, with abar_0 := 1 by definition
  (hence tilde_beta_1 = 0 and the final reverse step is deterministic).
- Forward marginal:   q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)
- Clean estimate:     x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
- Posterior mean:     mu(x0_hat, x_t, t) =
                        sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
                      + sqrt(abar_{t-1}) beta_t / (1 - abar_t)        * x0_hat
- Posterior variance: tilde_beta_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t,
  optionally interpolated toward beta_t on a log scale by a learned v in [0, 1].

The x_t coefficient uses the single-step sqrt(alpha_t); with it the exact
identity  c_xt * sqrt(abar_t) + c_x0 = sqrt(abar_{t-1})  holds at machine
precision for every t, i.e. noise-scale-matched constants are fixed points
of the posterior mean.

All schedule math is float64.  Operations are pure functions; a
NoiseSchedule is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients (all arrays are length T, index t-1)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    tilde_betas: np.ndarray

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep t={t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """abar_t, with abar_0 defined as 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._check_t(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        return self.alpha_bar(self._check_t(t) - 1)

    def tilde_beta(self, t: int) -> float:
        return float(self.tilde_betas[self._check_t(t) - 1])


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive.

    Requires 0 < beta_start <= beta_end < 1 and T >= 1.  T=1 degenerates to
    the single beta [beta_start].
    """
    T = int(T)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    abar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    tilde_betas = (1.0 - abar_prev) / (1.0 - alpha_bars) * betas
    for arr in (betas, alphas, alpha_bars, tilde_betas):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, tilde_betas=tilde_betas)


DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


def default_schedule() -> NoiseSchedule:
    """The standard linear schedule: T=1000, beta 1e-4 .. 0.02."""
    return build_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)


@dataclass
class DenoiserOutput:
    """Denoiser evaluation at (x_t, t): predicted noise, optional variance knob.

    ``v`` interpolates the reverse variance between tilde_beta_t (v=0) and
    beta_t (v=1) on a log scale; absent v means the fixed tilde_beta_t
    fallback.  Denoisers that learn v are expected to map their raw head
    output through (raw + 1) / 2 before returning it.
    """

    eps: np.ndarray
    v: np.ndarray | float | None = None


class _ClampCounter:
    """Counts out-of-range v values that had to be clamped (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    def bump(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def reset(self) -> None:
        with self._lock:
            self._count = 0


#: Global counter of clamped variance-interpolation values.
v_clamp_events = _ClampCounter()


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Single-shot forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParameterError(f"shape mismatch between x0 {x0.shape} and eps {eps.shape}")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of forward_sample at the same (t, eps)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ParameterError(f"shape mismatch between x_t {x_t.shape} and eps {eps.shape}")
    ab = sched.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def posterior_mean_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """(coefficient on x_t, coefficient on x0_hat) of the reverse posterior mean."""
    t = sched._check_t(t)
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar_prev(t)
    beta_t = sched.beta(t)
    alpha_t = sched.alpha(t)
    c_xt = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    return float(c_xt), float(c_x0)


def posterior_mean(x_hat0: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x_0 = x_hat0); see module docstring for the form.

    At t=1 the x_t coefficient vanishes (abar_0 = 1) and the mean equals
    x_hat0 exactly.
    """
    if int(t) == 0:
        raise ParameterError("posterior_mean undefined at t=0 (no transition)")
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_hat0.shape != x_t.shape:
        raise ParameterError(f"shape mismatch between x_hat0 {x_hat0.shape} and x_t {x_t.shape}")
    c_xt, c_x0 = posterior_mean_coefficients(t, sched)
    return c_xt * x_t + c_x0 * x_hat0


def posterior_variance(v, t: int, sched: NoiseSchedule):
    """Log-linear interpolation exp(v log beta_t + (1-v) log tilde_beta_t).

    Only defined for t >= 2; tilde_beta_1 = 0 makes the log degenerate, and
    the reverse step forces zero variance at t=1 instead.  Values of v
    outside [0, 1] are clamped and counted in ``v_clamp_events``.
    """
    t = sched._check_t(t)
    if t < 2:
        raise ParameterError("posterior_variance undefined at t=1 (variance forced to 0)")
    v = np.asarray(v, dtype=np.float64)
    out_of_range = int(np.count_nonzero((v < 0.0) | (v > 1.0)))
    if out_of_range:
        v_clamp_events.bump(out_of_range)
        v = np.clip(v, 0.0, 1.0)
    log_beta = np.log(sched.beta(t))
    log_tilde = np.log(sched.tilde_beta(t))
    out = np.exp(v * log_beta + (1.0 - v) * log_tilde)
    return float(out) if out.ndim == 0 else out


def reverse_step(x_t: np.ndarray, out: DenoiserOutput, t: int,
                 sched: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """One ancestral reverse transition x_t -> x_{t-1}.

    The Gaussian draw is supplied by the caller (purity: identical inputs
    give identical outputs).  At t=1 the step is deterministic and the
    noise argument is ignored.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(out.eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ParameterError(f"shape mismatch between x_t {x_t.shape} and eps {eps.shape}")
    x_hat0 = predict_x0(x_t, eps, t, sched)
    mean = posterior_mean(x_hat0, x_t, t, sched)
    if int(t) == 1:
        return mean
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x_t.shape:
        raise ParameterError(f"shape mismatch between x_t {x_t.shape} and noise {noise.shape}")
    if out.v is None:
        var = sched.tilde_beta(t)
    else:
        var = posterior_variance(out.v, t, sched)
    return mean + np.sqrt(var) * noise
