"""Condition corrector: denoises masked posterior samples into grid conditions.

The corrector (CRT) is the shared conv backbone with the condition pathway
enabled: the luminance of the initial condition y_T is added to the stem
feature map, the timestep enters through the embedding MLP, and the head
predicts a residual that is added to y_T on the grid.  Output support is
exactly the fixed grid: off-grid pixels are identically zero.

Training target: recover the clean ground-truth grid from a masked sample
of the ground-truth reverse posterior.  Two loss terms share one reduction
(mean over grid positions and channels, so magnitudes do not depend on the
stride k):

    prior term:  || IG * m_f - CRT(m_f * IG_prev, y_T, t) ||^2
    gap term:    || IG * m_f - CRT(m_f * x_crt,   y_T, t) ||^2

where x_crt is the corrector's own (gradient-detached) first-pass output,
and the two are blended by Omega(t) = t / T, so the prior term dominates
at high noise and the self-feeding gap term near the end of sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .common import luminance
from .degradation import DegradationConfig, degrade, resize_bicubic
from .errors import NumericalError, ParameterError
from .masks import Condition, FixedMask, make_fixed_mask, project_initial_condition
from .nn import Adam, EmaTracker, Params, UNet, UNetConfig
from .rng import RandomStream, stream
from .schedule import DenoiserOutput, NoiseSchedule, forward_sample, reverse_step

LOSS_DIVERGENCE_LIMIT = 1e6


def omega_schedule(t: int, T: int) -> float:
    """Loss blend weight Omega(t) = t / T, in [0, 1] and non-decreasing in t."""
    if not 1 <= t <= T:
        raise ParameterError(f"timestep t={t} outside [1, {T}]")
    omega = t / T
    assert 0.0 <= omega <= 1.0
    return omega


@dataclass
class CrtModel:
    """Trained corrector: backbone, parameters, and the grid stride it serves."""

    net: UNet
    params: Params
    k: int
    kind: str = "crt"

    @classmethod
    def create(cls, channels: int = 1, k: int = 2, seed: int = 0,
               dtype: str = "float64", base_width: int = 32) -> "CrtModel":
        cfg = UNetConfig(in_channels=channels, out_channels=channels,
                         base_width=base_width, cond_pathway=True, dtype=dtype)
        net = UNet(cfg)
        return cls(net=net, params=net.init_params(stream(seed, "crt")), k=k)

    @property
    def param_count(self) -> int:
        return self.net.param_count(self.params)

    def with_params(self, params: Params) -> "CrtModel":
        return CrtModel(net=self.net, params=params, k=self.k, kind=self.kind)

    def correct(self, masked_input: np.ndarray, y_T: np.ndarray, t: int) -> np.ndarray:
        return crt_forward(self, masked_input, y_T, t)

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint

        meta = {"meta.model": np.array([1.0]),
                "meta.channels": np.array([float(self.net.cfg.in_channels)]),
                "meta.base_width": np.array([float(self.net.cfg.base_width)]),
                "meta.k": np.array([float(self.k)])}
        save_checkpoint(path, {**meta, **self.params})

    @classmethod
    def load(cls, path) -> "CrtModel":
        from .checkpoint import load_checkpoint
        from .errors import DataError

        blob = load_checkpoint(path)
        if int(blob.pop("meta.model", np.array([-1.0]))[0]) != 1:
            raise DataError(f"{path}: not a corrector checkpoint")
        channels = int(blob.pop("meta.channels")[0])
        base_width = int(blob.pop("meta.base_width")[0])
        k = int(blob.pop("meta.k")[0])
        cfg = UNetConfig(in_channels=channels, out_channels=channels,
                        base_width=base_width, cond_pathway=True)
        return cls(net=UNet(cfg), params=blob, k=k)


@dataclass
class IdentityCorrector:
    """Stub corrector: returns the masked posterior's grid values unchanged.

    Well-defined as a single-call stub, but unusable inside a sampling
    loop: it cannot undo the sqrt(abar) noise scaling a trained corrector
    removes, and the grid feedback then has per-step gain above 1 (the
    chain diverges geometrically).  Samplers use FrozenCorrector as the
    no-correction mode instead.
    """

    k: int
    kind: str = "identity"

    def correct(self, masked_input: np.ndarray, y_T: np.ndarray, t: int) -> np.ndarray:
        fm = make_fixed_mask(masked_input.shape[0], masked_input.shape[1], self.k)
        return masked_input * fm.mask[:, :, None]


@dataclass
class FrozenCorrector:
    """No-repair mode: the condition stays the initial y_T at every step.

    This is the stable meaning of running without a corrector: grid pixels
    are re-injected from the original condition each step and never update.
    """

    k: int
    kind: str = "frozen"

    def correct(self, masked_input: np.ndarray, y_T: np.ndarray, t: int) -> np.ndarray:
        fm = make_fixed_mask(y_T.shape[0], y_T.shape[1], self.k)
        return y_T * fm.mask[:, :, None]


def _batched(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ParameterError(f"expected (H, W, C) or (B, H, W, C), got {arr.shape}")


def crt_forward(model: CrtModel, masked_input: np.ndarray, y_T: np.ndarray | Condition,
                t, want_cache: bool = False):
    """Corrected grid condition: m_f * (y_T + residual).  Off-grid output is 0.

    Accepts single images or batches; t may be an int or a per-sample array.
    """
    y_vals = y_T.values if isinstance(y_T, Condition) else y_T
    x, squeeze = _batched(np.asarray(masked_input, dtype=np.float64))
    y, _ = _batched(np.asarray(y_vals, dtype=np.float64))
    if x.shape != y.shape:
        raise ParameterError(f"masked input {x.shape} and condition {y.shape} differ")
    fm = make_fixed_mask(x.shape[1], x.shape[2], model.k)
    ts = np.full(x.shape[0], int(t)) if np.ndim(t) == 0 else np.asarray(t)
    cond = np.stack([luminance(img) for img in y])
    residual, cache = model.net.forward(model.params, x, ts, cond_lum=cond)
    out = fm.mask[None, :, :, None] * (y + residual.astype(np.float64))
    if want_cache:
        return out, (cache, fm)
    return out[0] if squeeze else out


@dataclass
class CrtTrainSample:
    """One training draw: clean target, condition, timestep, posterior sample."""

    I_G: np.ndarray
    y_T: np.ndarray
    t: int
    I_G_prev: np.ndarray
    x_hat_crt: np.ndarray | None = None


def _grid_sq_error(pred: np.ndarray, target_masked: np.ndarray, fm: FixedMask) -> float:
    n = fm.popcount * pred.shape[-1]
    diff = (pred - target_masked) * fm.mask[:, :, None]
    return float(np.sum(diff * diff) / n)


def loss_prior(model: CrtModel, sample: CrtTrainSample) -> float:
    """Mean squared grid error against the clean target, posterior-sample input."""
    fm = make_fixed_mask(sample.I_G.shape[0], sample.I_G.shape[1], model.k)
    pred = crt_forward(model, sample.I_G_prev * fm.mask[:, :, None], sample.y_T, sample.t)
    return _grid_sq_error(pred, sample.I_G * fm.mask[:, :, None], fm)


def loss_gap(model: CrtModel, sample: CrtTrainSample) -> float:
    """Same reduction, but the input is the detached first-pass output."""
    if sample.x_hat_crt is None:
        raise ParameterError("sample.x_hat_crt missing (run the detached first pass)")
    fm = make_fixed_mask(sample.I_G.shape[0], sample.I_G.shape[1], model.k)
    pred = crt_forward(model, sample.x_hat_crt * fm.mask[:, :, None], sample.y_T, sample.t)
    return _grid_sq_error(pred, sample.I_G * fm.mask[:, :, None], fm)


def loss_crt(model: CrtModel, sample: CrtTrainSample, omega_t: float) -> float:
    """Convex blend Omega * prior + (1 - Omega) * gap."""
    if not 0.0 <= omega_t <= 1.0:
        raise ParameterError(f"omega_t must be in [0, 1], got {omega_t}")
    return omega_t * loss_prior(model, sample) + (1.0 - omega_t) * loss_gap(model, sample)


def crt_gradients(model: CrtModel, batch: list[CrtTrainSample],
                  omega_fn=None, T: int | None = None):
    """(mean loss, exact parameter gradients) of loss_crt over a batch.

    omega_fn(t) defaults to t / T.  The gap term's input is produced by a
    gradient-detached forward pass on the same sample and timestep.
    """
    if not batch:
        raise ParameterError("gradient batch is empty")
    if omega_fn is None:
        if T is None:
            raise ParameterError("need omega_fn or T for the default schedule")
        omega_fn = lambda t: omega_schedule(t, T)

    fm = make_fixed_mask(batch[0].I_G.shape[0], batch[0].I_G.shape[1], model.k)
    mask = fm.mask[:, :, None]
    I_G = np.stack([s.I_G for s in batch])
    y_T = np.stack([s.y_T for s in batch])
    ts = np.array([s.t for s in batch])
    prev_masked = np.stack([s.I_G_prev for s in batch]) * mask
    omegas = np.array([omega_fn(int(t)) for t in ts])
    if np.any((omegas < 0) | (omegas > 1)):
        raise ParameterError("omega schedule left [0, 1]")
    target = I_G * mask

    # Detached first pass supplies the gap-term input (reused when a sample
    # already carries one, e.g. for gradient checks against a frozen input).
    if any(s.x_hat_crt is None for s in batch):
        x_crt = crt_forward(model, prev_masked, y_T, ts)
        for s, xc in zip(batch, x_crt):
            if s.x_hat_crt is None:
                s.x_hat_crt = xc
    x_crt = np.stack([s.x_hat_crt for s in batch])

    B = len(batch)
    n = fm.popcount * I_G.shape[-1]
    total_loss = 0.0
    grads_total: Params = {}
    weights = {"prior": omegas, "gap": 1.0 - omegas}
    inputs = {"prior": prev_masked, "gap": x_crt * mask}
    for term, w in weights.items():
        pred, (cache, _) = crt_forward(model, inputs[term], y_T, ts, want_cache=True)
        diff = (pred - target) * mask
        per_sample = np.sum(diff * diff, axis=(1, 2, 3)) / n
        total_loss += float(np.mean(w * per_sample))
        dpred = (2.0 / (n * B)) * diff * w[:, None, None, None]
        # d(pred)/d(residual) is the mask itself; fold it in before backprop.
        grads = model.net.backward(model.params, cache, dpred * mask)
        for name, g in grads.items():
            grads_total[name] = grads_total.get(name, 0.0) + g
    if not np.isfinite(total_loss):
        raise NumericalError("corrector loss is non-finite")
    return total_loss, grads_total


@dataclass(frozen=True)
class ConditionSynthesis:
    """How training conditions y_T are synthesized from clean images.

    kind "bicubic": shrink by `scale` and re-expand to the (H/k, W/k) base
    condition (plain downsampling restoration).  kind "pipeline": run the
    full blind degradation model first, then build the base condition.
    """

    k: int = 2
    kind: str = "bicubic"
    scale: int = 4
    degradation: DegradationConfig | None = None

    def build(self, gt: np.ndarray, rng: RandomStream) -> np.ndarray:
        H, W = gt.shape[:2]
        if self.kind == "bicubic":
            lr = resize_bicubic(gt, H // self.scale, W // self.scale)
            base = resize_bicubic(lr, H // self.k, W // self.k)
        elif self.kind == "pipeline":
            if self.degradation is None:
                raise ParameterError("pipeline synthesis needs a DegradationConfig")
            full = degrade(gt, self.degradation, rng)
            base = resize_bicubic(full, H // self.k, W // self.k)
        else:
            raise ParameterError(f"unknown synthesis kind {self.kind!r}")
        fm = make_fixed_mask(H, W, self.k)
        return project_initial_condition(base, fm).values


@dataclass(frozen=True)
class CrtTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 5
    ema_decay: float = 0.9999
    seed: int = 0
    dtype: str = "float64"
    base_width: int = 32
    synthesis: ConditionSynthesis = field(default_factory=ConditionSynthesis)

    def validate(self) -> "CrtTrainConfig":
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError(f"EMA decay must be in (0, 1), got {self.ema_decay}")
        return self


@dataclass
class CrtTrainResult:
    model: CrtModel
    ema_model: CrtModel
    history: list = field(default_factory=list)

    def epoch_means(self) -> list:
        epochs = sorted({row[0] for row in self.history})
        return [float(np.mean([r[2] for r in self.history if r[0] == e])) for e in epochs]


def train_crt(dataset: list, sched: NoiseSchedule, cfg: CrtTrainConfig) -> CrtTrainResult:
    """Fit the corrector on clean images with synthesized conditions.

    Per step and sample: draw t uniformly, build the ground-truth posterior
    sample at t-1 using the true forward noise, mask it to the grid, and
    take one Adam step on the blended objective.  EMA parameters are
    tracked alongside and returned for inference use.
    """
    cfg = cfg.validate()
    if not dataset:
        raise ParameterError("training dataset is empty")
    images = np.stack([np.asarray(im, dtype=np.float64) for im in dataset])
    B_all, H, W, C = images.shape
    syn = cfg.synthesis
    conditions = np.stack([
        syn.build(images[i], stream(cfg.seed, "degrade", i)) for i in range(B_all)
    ])
    model = CrtModel.create(channels=C, k=syn.k, seed=cfg.seed, dtype=cfg.dtype,
                            base_width=cfg.base_width)
    opt = Adam(lr=cfg.learning_rate)
    ema = EmaTracker(model.params, cfg.ema_decay)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(B_all)
        for start in range(0, B_all, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ts = stream(cfg.seed, "t", step).integers(1, sched.T, len(idx))
            batch = []
            for j, (i, t) in enumerate(zip(idx, ts)):
                draw = stream(cfg.seed, "posterior", step, j)
                eps = draw.child("eps").normal(images[i].shape)
                x_t = forward_sample(images[i], int(t), eps, sched)
                z = draw.child("z").normal(images[i].shape)
                prev = reverse_step(x_t, DenoiserOutput(eps=eps), int(t), sched, z)
                batch.append(CrtTrainSample(I_G=images[i], y_T=conditions[i],
                                            t=int(t), I_G_prev=prev))
            loss, grads = crt_gradients(model, batch, T=sched.T)
            if loss > LOSS_DIVERGENCE_LIMIT:
                raise NumericalError(f"corrector training diverged at step {step}: loss={loss}")
            opt.step(model.params, grads)
            ema.update(model.params)
            history.append((epoch, step, loss))
            step += 1
    return CrtTrainResult(model=model, ema_model=model.with_params(ema.shadow),
                          history=history)
