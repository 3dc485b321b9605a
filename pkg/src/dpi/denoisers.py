"""Pluggable denoisers: an exact Gaussian oracle and a small trainable net.

A denoiser is anything with ``evaluate(x_t, t) -> DenoiserOutput`` that is
pure (same inputs, same outputs) and shape-preserving.  The Gaussian
oracle assumes pixelwise-independent data x0 ~ N(mu0, var0) and returns
the noise prediction implied by the exact conjugate posterior mean

    E[x0 | x_t] = (sqrt(abar_t) var0 x_t + (1 - abar_t) mu0)
                  / (abar_t var0 + 1 - abar_t)

which makes sampling-machinery errors visible against closed-form truth.
The tiny denoiser is the shared conv backbone (no condition pathway)
fitted with the plain noise-prediction objective ||eps - eps_hat||^2 and
a fixed-variance reverse step (no learned v head by default; the sampling
machinery supports a learned v through DenoiserOutput regardless).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError
from .nn import Adam, EmaTracker, Params, UNet, UNetConfig
from .rng import RandomStream, stream
from .schedule import DenoiserOutput, NoiseSchedule, reverse_step

LOSS_DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class GaussianOracleDenoiser:
    """Closed-form noise predictor for pixelwise Gaussian data."""

    mu0: np.ndarray
    var0: np.ndarray
    sched: NoiseSchedule
    kind: str = "gaussian-oracle"

    def __post_init__(self):
        if np.any(np.asarray(self.var0) <= 0):
            raise ParameterError("oracle var0 must be positive everywhere")

    def posterior_mean_x0(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab = self.sched.alpha_bar(t)
        num = np.sqrt(ab) * self.var0 * x_t + (1.0 - ab) * self.mu0
        den = ab * self.var0 + (1.0 - ab)
        return num / den

    def evaluate(self, x_t: np.ndarray, t: int) -> DenoiserOutput:
        return oracle_eps(self, x_t, t, self.sched)


def oracle_eps(d: GaussianOracleDenoiser, x_t: np.ndarray, t: int,
               sched: NoiseSchedule) -> DenoiserOutput:
    """Noise prediction implied by the exact Gaussian posterior mean."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = sched.alpha_bar(t)
    e_x0 = (np.sqrt(ab) * d.var0 * x_t + (1.0 - ab) * d.mu0) / (ab * d.var0 + (1.0 - ab))
    eps = (x_t - np.sqrt(ab) * e_x0) / np.sqrt(1.0 - ab)
    return DenoiserOutput(eps=eps, v=None)


@dataclass
class TinyDenoiser:
    """Conv-backbone noise predictor; fixed reverse variance."""

    net: UNet
    params: Params
    kind: str = "tiny-denoiser"

    @classmethod
    def create(cls, channels: int = 1, seed: int = 0, dtype: str = "float64",
               base_width: int = 32) -> "TinyDenoiser":
        cfg = UNetConfig(in_channels=channels, out_channels=channels,
                         base_width=base_width, cond_pathway=False, dtype=dtype)
        net = UNet(cfg)
        return cls(net=net, params=net.init_params(stream(seed, "tiny-denoiser")))

    @property
    def param_count(self) -> int:
        return self.net.param_count(self.params)

    def evaluate(self, x_t: np.ndarray, t: int) -> DenoiserOutput:
        x_t = np.asarray(x_t, dtype=np.float64)
        out, _ = self.net.forward(self.params, x_t[None], [int(t)])
        return DenoiserOutput(eps=out[0].astype(np.float64), v=None)

    def with_params(self, params: Params) -> "TinyDenoiser":
        return TinyDenoiser(net=self.net, params=params, kind=self.kind)

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint

        meta = {"meta.model": np.array([0.0]),
                "meta.channels": np.array([float(self.net.cfg.in_channels)]),
                "meta.base_width": np.array([float(self.net.cfg.base_width)])}
        save_checkpoint(path, {**meta, **self.params})

    @classmethod
    def load(cls, path) -> "TinyDenoiser":
        from .checkpoint import load_checkpoint
        from .errors import DataError

        blob = load_checkpoint(path)
        if int(blob.pop("meta.model", np.array([-1.0]))[0]) != 0:
            raise DataError(f"{path}: not a denoiser checkpoint")
        channels = int(blob.pop("meta.channels")[0])
        base_width = int(blob.pop("meta.base_width")[0])
        cfg = UNetConfig(in_channels=channels, out_channels=channels,
                         base_width=base_width, cond_pathway=False)
        return cls(net=UNet(cfg), params=blob)


@dataclass(frozen=True)
class DenoiserTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 5
    ema_decay: float = 0.9999
    seed: int = 0
    dtype: str = "float64"
    base_width: int = 32


@dataclass
class TrainResult:
    model: object
    ema_model: object
    history: list = field(default_factory=list)  # rows: (epoch, step, loss)

    def epoch_means(self) -> list:
        epochs = sorted({row[0] for row in self.history})
        return [float(np.mean([r[2] for r in self.history if r[0] == e])) for e in epochs]


def noise_prediction_loss_and_grads(net: UNet, params: Params, x0_batch: np.ndarray,
                                    ts: np.ndarray, eps_batch: np.ndarray,
                                    sched: NoiseSchedule, want_grads: bool = True):
    """Mean ||eps - eps_hat||^2 over the batch, with exact parameter grads."""
    B = x0_batch.shape[0]
    ab = np.array([sched.alpha_bar(int(t)) for t in ts])[:, None, None, None]
    x_t = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps_batch
    out, cache = net.forward(params, x_t, ts)
    diff = out - eps_batch.astype(out.dtype)
    loss = float(np.mean(diff * diff))
    if not want_grads:
        return loss, None
    grads = net.backward(params, cache, 2.0 * diff / diff.size)
    return loss, grads


def train_tiny_denoiser(dataset: list, sched: NoiseSchedule,
                        cfg: DenoiserTrainConfig) -> TrainResult:
    """Fit the noise-prediction objective with Adam + EMA.

    Per step: sample t uniformly in [1, T] and eps ~ N(0, I) per image,
    noise the clean image in one shot, regress the net output onto eps.
    Deterministic for a fixed seed (shuffling, t and eps draws are all
    keyed streams).  Aborts when the loss exceeds 1e6 or goes non-finite.
    """
    if not dataset:
        raise ParameterError("training dataset is empty")
    images = np.stack([np.asarray(im, dtype=np.float64) for im in dataset])
    channels = images.shape[3]
    model = TinyDenoiser.create(channels=channels, seed=cfg.seed, dtype=cfg.dtype,
                                base_width=cfg.base_width)
    params = model.params
    opt = Adam(lr=cfg.learning_rate)
    ema = EmaTracker(params, cfg.ema_decay)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(images))
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = images[idx]
            ts = stream(cfg.seed, "t", step).integers(1, sched.T, len(idx))
            eps = stream(cfg.seed, "eps", step).normal(batch.shape)
            loss, grads = noise_prediction_loss_and_grads(model.net, params, batch,
                                                          ts, eps, sched)
            if not np.isfinite(loss) or loss > LOSS_DIVERGENCE_LIMIT:
                raise NumericalError(f"denoiser training diverged at step {step}: loss={loss}")
            opt.step(params, grads)
            ema.update(params)
            history.append((epoch, step, loss))
            step += 1
    model = model.with_params(params)
    return TrainResult(model=model, ema_model=model.with_params(ema.shadow), history=history)


def holdout_noise_loss(model: TinyDenoiser, images: list, sched: NoiseSchedule,
                       seed: int = 1234) -> float:
    """Deterministic held-out noise-prediction loss (one draw per image)."""
    batch = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    ts = stream(seed, "holdout-t").integers(1, sched.T, len(batch))
    eps = stream(seed, "holdout-eps").normal(batch.shape)
    loss, _ = noise_prediction_loss_and_grads(model.net, model.params, batch, ts,
                                              eps, sched, want_grads=False)
    return loss


def sample_unconditional(denoiser, sched: NoiseSchedule, shape: tuple,
                         rng: RandomStream) -> np.ndarray:
    """Full ancestral chain from N(0, I); shape may carry leading batch dims."""
    x = rng.child("init").normal(shape)
    for t in range(sched.T, 0, -1):
        out = denoiser.evaluate(x, t)
        noise = rng.child("step", t).normal(shape) if t > 1 else np.zeros(shape)
        x = reverse_step(x, out, t, sched, noise)
    return x
