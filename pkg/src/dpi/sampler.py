"""Two-stage masked posterior sampling, ancestral and implicit variants.

Every step runs one denoiser evaluation shared by both branches:

    x branch: ordinary reverse step of the sampler state x_t
    y branch: the clean condition y_t is re-noised with the *predicted*
              noise (so its implied clean estimate is y_t exactly) and
              pushed through the same posterior with the same variance
              and the same Gaussian draw as the x branch

then exactly one combination rule fires. Above the stage split (t > tau)
the fixed grid mask pastes condition pixels (strong constraint); at and
below it a fresh edge-adaptive mask blends them with weight w = t / omega,
clamped to [0, 1], and the condition is overwritten by the combined state.
Each step ends by passing the masked posterior through the corrector to
produce the next (clean) condition.

The implicit sampler walks a uniformly spaced sub-sequence of timesteps
with the printed noise scale

    sigma_t^2 = eta * sqrt((1 - abar_prev) / (1 - abar_t))
                    * sqrt((1 - abar_t) / abar_prev)

capped at 1 - abar_prev so the direction coefficient stays real (the
uncapped value exceeds it early in the chain); set sigma_form="canonical"
for the conventional eta^2 (1 - abar_prev)/(1 - abar_t) (1 - abar_t/abar_prev)
variance instead.  Stage logic and w use the position within the
sub-sequence; noise math and the corrector use original timesteps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corrector import FrozenCorrector
from .errors import ParameterError
from .masks import AdaptiveMask, Condition, FixedMask, make_fixed_mask, mask_gen
from .rng import RandomStream
from .schedule import (NoiseSchedule, posterior_mean, posterior_variance,
                       predict_x0)

__all__ = [
    "DpiConfig", "SampleTrace", "noisy_condition", "conditional_posterior",
    "fcm_combine", "racm_combine", "ddim_sigma", "ddim_timesteps",
    "dpi_sample", "dpi_sample_ddim", "sample_unconditional_ddim",
]


@dataclass(frozen=True)
class DpiConfig:
    """Sampling hyperparameters: stage split, mask sharpness, blend scale."""

    tau: int = 300
    s: float = 1.2
    omega: float = 750.0
    k: int = 2
    sampler_kind: str = "ancestral"  # "ancestral" | "implicit"
    steps: int = 1000
    eta: float = 0.1
    seed: int = 0
    sigma_form: str = "printed"  # "printed" | "canonical"
    clip_x0: bool = False  # clamp the x-branch clean estimate to [-1, 1];
    # stabilizes weakly trained denoisers, off for analytic-oracle work

    def validate(self) -> "DpiConfig":
        if self.tau < 0 or self.tau > self.steps:
            raise ParameterError(f"tau={self.tau} outside [0, steps={self.steps}]")
        if self.omega <= 0:
            raise ParameterError(f"omega must be > 0, got {self.omega}")
        if self.s <= 0:
            raise ParameterError(f"s must be > 0, got {self.s}")
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError(f"eta must be in [0, 1], got {self.eta}")
        if self.sampler_kind not in ("ancestral", "implicit"):
            raise ParameterError(f"unknown sampler kind {self.sampler_kind!r}")
        if self.sigma_form not in ("printed", "canonical"):
            raise ParameterError(f"unknown sigma form {self.sigma_form!r}")
        if self.k < 1:
            raise ParameterError(f"stride k must be >= 1, got {self.k}")
        return self


@dataclass
class SampleTrace:
    """Optional per-step record: stage bookkeeping plus image snapshots.

    Disabled unless passed to a sampler.  `every` thins snapshots (the
    bookkeeping rows are always kept).  Snapshot timesteps are strictly
    decreasing because sampling walks t downward.
    """

    every: int = 1
    rows: list = field(default_factory=list)       # (t, stage, w, ma_popcount)
    snapshots: list = field(default_factory=list)  # (t, x, y, mask or None)
    denoiser_calls: int = 0

    def record(self, t, stage, w, ma_popcount, x, y, mask) -> None:
        self.rows.append((int(t), stage, float(w), int(ma_popcount)))
        if (len(self.rows) - 1) % max(self.every, 1) == 0:
            self.snapshots.append((int(t), np.array(x), np.array(y),
                                   None if mask is None else np.array(mask)))

    @property
    def w_values(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def dump(self, out_dir) -> None:
        """Numbered PGM/PPM snapshots plus a plain-text manifest of rows."""
        from .pnm import write_image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (t, x, y, mask) in enumerate(self.snapshots):
            write_image(x, out / f"{i:04d}_t{t:04d}_x.pgm" if x.shape[-1] == 1
                        else out / f"{i:04d}_t{t:04d}_x.ppm")
            write_image(y, out / f"{i:04d}_t{t:04d}_y.pgm" if y.shape[-1] == 1
                        else out / f"{i:04d}_t{t:04d}_y.ppm")
        with (out / "trace.txt").open("w") as fh:
            fh.write("t stage w ma_popcount\n")
            for t, stage, w, pop in self.rows:
                fh.write(f"{t} {stage} {w:.6f} {pop}\n")


def noisy_condition(y_t: np.ndarray, eps_theta: np.ndarray, t: int,
                    sched: NoiseSchedule) -> np.ndarray:
    """Re-noise the clean condition with the model's predicted noise.

    sqrt(abar_t) y + sqrt(1 - abar_t) eps_theta; because the same eps is
    used, predict_x0 of the result returns y exactly.
    """
    y_t = np.asarray(y_t, dtype=np.float64)
    eps_theta = np.asarray(eps_theta, dtype=np.float64)
    if y_t.shape != eps_theta.shape:
        raise ParameterError(f"shape mismatch: {y_t.shape} vs {eps_theta.shape}")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * y_t + np.sqrt(1.0 - ab) * eps_theta


def conditional_posterior(y_t: np.ndarray, y_t_n: np.ndarray, t: int,
                          sched: NoiseSchedule, shared_variance,
                          noise: np.ndarray) -> np.ndarray:
    """Posterior draw for the condition branch, variance shared with x.

    mean = posterior_mean(x0_hat := y_t, x_t := y_t_n, t); at t=1 the draw
    is deterministic (the mean collapses to y_t).
    """
    mean = posterior_mean(y_t, y_t_n, t, sched)
    if int(t) == 1:
        return mean
    return mean + np.sqrt(shared_variance) * np.asarray(noise, dtype=np.float64)


def fcm_combine(x_prev: np.ndarray, y_prev: np.ndarray, fm: FixedMask) -> np.ndarray:
    """Grid pixels from the condition branch, everything else from x."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if x_prev.shape != y_prev.shape:
        raise ParameterError(f"shape mismatch: {x_prev.shape} vs {y_prev.shape}")
    m = fm.mask[:, :, None]
    return (1.0 - m) * x_prev + m * y_prev


def racm_combine(x_prev: np.ndarray, y_prev: np.ndarray, am: AdaptiveMask,
                 w: float) -> np.ndarray:
    """Weighted paste on the adaptive support: w*y + (1-w)*x there, x elsewhere."""
    if not 0.0 <= w <= 1.0:
        raise ParameterError(f"weight w must be in [0, 1], got {w}")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if x_prev.shape != y_prev.shape:
        raise ParameterError(f"shape mismatch: {x_prev.shape} vs {y_prev.shape}")
    m = am.mask[:, :, None]
    return (1.0 - m) * x_prev + w * m * y_prev + (1.0 - w) * m * x_prev


def _clamped_weight(step_index: int, omega: float) -> float:
    w = min(max(step_index / omega, 0.0), 1.0)
    assert 0.0 <= w <= 1.0
    return w


def _resolve_corrector(crt, k: int):
    if crt is None:
        warnings.warn("no corrector supplied; conditions stay frozen at y_T",
                      stacklevel=3)
        return FrozenCorrector(k=k)
    return crt


def _step_variance(out, t, sched: NoiseSchedule):
    if int(t) == 1:
        return 0.0
    if out.v is None:
        return sched.tilde_beta(t)
    return posterior_variance(out.v, t, sched)


def dpi_sample(denoiser, crt, y_T: Condition | np.ndarray, cfg: DpiConfig,
               sched: NoiseSchedule, rng: RandomStream,
               trace: SampleTrace | None = None) -> np.ndarray:
    """Full ancestral run over t = T..1; returns x_0.

    Deterministic for fixed (inputs, config, stream seed): the initial
    state, the per-step shared Gaussian, and each adaptive mask draw come
    from streams keyed by purpose and timestep.
    """
    cfg = cfg.validate()
    if cfg.sampler_kind != "ancestral":
        raise ParameterError("dpi_sample handles the ancestral kind; use dpi_sample_ddim")
    if cfg.steps != sched.T:
        raise ParameterError(f"ancestral sampling needs steps == T ({cfg.steps} != {sched.T})")
    y = np.asarray(y_T.values if isinstance(y_T, Condition) else y_T, dtype=np.float64)
    y_init = y.copy()
    fm = make_fixed_mask(y.shape[0], y.shape[1], cfg.k)
    corrector = _resolve_corrector(crt, cfg.k)
    mask3 = fm.mask[:, :, None]

    x = rng.child("init").normal(y.shape)
    for t in range(sched.T, 0, -1):
        out = denoiser.evaluate(x, t)
        if trace is not None:
            trace.denoiser_calls += 1
        eps = np.asarray(out.eps, dtype=np.float64)
        var = _step_variance(out, t, sched)
        z = rng.child("z", t).normal(y.shape) if t > 1 else np.zeros_like(y)

        x_hat0 = predict_x0(x, eps, t, sched)
        if cfg.clip_x0:
            x_hat0 = np.clip(x_hat0, -1.0, 1.0)
        x_prev = posterior_mean(x_hat0, x, t, sched) + np.sqrt(var) * z
        y_n = noisy_condition(y, eps, t, sched)
        y_prev = conditional_posterior(y, y_n, t, sched, var, z)

        am = None
        if t > cfg.tau:
            stage, w = "fcm", 1.0
            x = fcm_combine(x_prev, y_prev, fm)
        else:
            am = mask_gen(y, cfg.k, cfg.s, rng.child("mask", t))
            w = _clamped_weight(t, cfg.omega)
            stage = "racm"
            x = racm_combine(x_prev, y_prev, am, w)
            y_prev = x
        y = corrector.correct(mask3 * y_prev, y_init, t)
        if trace is not None:
            trace.record(t, stage, w, 0 if am is None else am.popcount, x, y,
                         None if am is None else am.mask)
    return x


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced, both endpoints included: steps values over [1, T]."""
    if not 1 <= steps <= T:
        raise ParameterError(f"steps={steps} outside [1, T={T}]")
    if steps == 1:
        return np.array([T])
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return ts


def ddim_sigma(t: int, eta: float, sched: NoiseSchedule, t_prev: int | None = None,
               form: str = "printed") -> float:
    """Implicit-step noise scale between t and the previous kept timestep.

    "printed" evaluates sigma^2 = eta sqrt((1-abar_prev)/(1-abar_t))
    sqrt((1-abar_t)/abar_prev) exactly as stated; "canonical" uses the
    conventional implicit-sampler sigma.  The first transition of the
    chain (t_prev = 0) has sigma = 0.
    """
    if t_prev is None:
        t_prev = t - 1
    if t_prev == 0:
        return 0.0
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    if form == "printed":
        sig2 = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt((1.0 - ab_t) / ab_p)
        return float(np.sqrt(sig2))
    if form == "canonical":
        return float(eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t))
                     * np.sqrt(1.0 - ab_t / ab_p))
    raise ParameterError(f"unknown sigma form {form!r}")


def _implicit_coeffs(t: int, t_prev: int, cfg_eta: float, sigma_form: str,
                     sched: NoiseSchedule) -> tuple[float, float, float]:
    """(sqrt(abar_prev), direction coefficient, sigma) for one implicit step."""
    ab_p = sched.alpha_bar(t_prev) if t_prev >= 1 else 1.0
    sigma = ddim_sigma(t, cfg_eta, sched, t_prev, form=sigma_form)
    sig2 = min(sigma * sigma, 1.0 - ab_p)  # keep the direction term real
    return float(np.sqrt(ab_p)), float(np.sqrt(1.0 - ab_p - sig2)), float(np.sqrt(sig2))


def dpi_sample_ddim(denoiser, crt, y_T: Condition | np.ndarray, cfg: DpiConfig,
                    sched: NoiseSchedule, rng: RandomStream,
                    trace: SampleTrace | None = None) -> np.ndarray:
    """Implicit (thinned) run over cfg.steps timesteps; returns x_0.

    The stage split tau and the weight w = i / omega are indexed by the
    position i in the thinned sub-sequence (i = steps at the start, 1 at
    the end); the corrector and all schedule math see original timesteps.
    At eta = 0 the x update is deterministic and runs are bit-identical
    for a fixed seed.
    """
    cfg = cfg.validate()
    if cfg.sampler_kind != "implicit":
        raise ParameterError("dpi_sample_ddim handles the implicit kind; use dpi_sample")
    ts = ddim_timesteps(sched.T, cfg.steps)
    y = np.asarray(y_T.values if isinstance(y_T, Condition) else y_T, dtype=np.float64)
    y_init = y.copy()
    fm = make_fixed_mask(y.shape[0], y.shape[1], cfg.k)
    corrector = _resolve_corrector(crt, cfg.k)
    mask3 = fm.mask[:, :, None]

    x = rng.child("init").normal(y.shape)
    for i in range(len(ts), 0, -1):
        t = int(ts[i - 1])
        t_prev = int(ts[i - 2]) if i >= 2 else 0
        out = denoiser.evaluate(x, t)
        if trace is not None:
            trace.denoiser_calls += 1
        eps = np.asarray(out.eps, dtype=np.float64)
        root_ab_p, dir_coef, sigma = _implicit_coeffs(t, t_prev, cfg.eta,
                                                      cfg.sigma_form, sched)
        z = rng.child("z", t).normal(y.shape)

        x_hat0 = predict_x0(x, eps, t, sched)
        if cfg.clip_x0:
            x_hat0 = np.clip(x_hat0, -1.0, 1.0)
        x_prev = root_ab_p * x_hat0 + dir_coef * eps + sigma * z
        y_n = noisy_condition(y, eps, t, sched)
        y_prev = root_ab_p * predict_x0(y_n, eps, t, sched) + dir_coef * eps + sigma * z

        am = None
        if i > cfg.tau:
            stage, w = "fcm", 1.0
            x = fcm_combine(x_prev, y_prev, fm)
        else:
            am = mask_gen(y, cfg.k, cfg.s, rng.child("mask", t))
            w = _clamped_weight(i, cfg.omega)
            stage = "racm"
            x = racm_combine(x_prev, y_prev, am, w)
            y_prev = x
        y = corrector.correct(mask3 * y_prev, y_init, t)
        if trace is not None:
            trace.record(t, stage, w, 0 if am is None else am.popcount, x, y,
                         None if am is None else am.mask)
    return x


def sample_unconditional_ddim(denoiser, sched: NoiseSchedule, shape: tuple,
                              steps: int, eta: float, rng: RandomStream,
                              sigma_form: str = "printed") -> np.ndarray:
    """Plain implicit chain without conditioning (shape may be batched)."""
    ts = ddim_timesteps(sched.T, steps)
    x = rng.child("init").normal(shape)
    for i in range(len(ts), 0, -1):
        t = int(ts[i - 1])
        t_prev = int(ts[i - 2]) if i >= 2 else 0
        eps = np.asarray(denoiser.evaluate(x, t).eps, dtype=np.float64)
        root_ab_p, dir_coef, sigma = _implicit_coeffs(t, t_prev, eta, sigma_form, sched)
        z = rng.child("z", t).normal(shape)
        x = root_ab_p * predict_x0(x, eps, t, sched) + dir_coef * eps + sigma * z
    return x
