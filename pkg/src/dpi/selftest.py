"""Built-in health checks: algebra, masks, oracle moments, gradients, I/O.

Each suite returns named check results; ``run_all`` aggregates them and
the CLI prints one PASS/FAIL line per check.  These are quick smoke-level
versions of the invariants (the pytest suite runs the full-strength
variants); the whole run stays well under a minute.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, metrics
from .corrector import CrtModel, CrtTrainSample, FrozenCorrector, crt_gradients
from .degradation import DegradationConfig, degrade, sample_severe_config, SEVERE_RANGES
from .denoisers import (GaussianOracleDenoiser, TinyDenoiser,
                        noise_prediction_loss_and_grads, sample_unconditional)
from .errors import DataError
from .masks import (bernoulli_mask, edge_probability_map, make_fixed_mask, mask_gen,
                    project_initial_condition, backtrack)
from .nn import finite_difference_grad, sample_param_positions
from .rng import stream
from .sampler import DpiConfig, SampleTrace, dpi_sample, dpi_sample_ddim, fcm_combine
from .schedule import (NoiseSchedule, build_linear_schedule, forward_sample,
                       posterior_mean_coefficients, posterior_variance, predict_x0)


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str = ""


def _rel_err(a, b):
    denom = np.maximum(np.abs(a), np.abs(b))
    return np.abs(a - b) / np.where(denom > 1e-300, denom, 1.0)


def suite_schedule_algebra(sched: NoiseSchedule | None = None) -> list[CheckResult]:
    out = []
    sched = sched or build_linear_schedule(400, 1e-4, 0.03)

    ts = np.arange(1, sched.T + 1)
    coefs = np.array([posterior_mean_coefficients(int(t), sched) for t in ts])
    abar = np.array([sched.alpha_bar(int(t)) for t in ts])
    abar_prev = np.array([sched.alpha_bar_prev(int(t)) for t in ts])
    dev = np.abs(coefs[:, 0] * np.sqrt(abar) + coefs[:, 1] - np.sqrt(abar_prev)).max()
    out.append(CheckResult("schedule-algebra", "coefficient-identity", dev < 1e-9,
                           f"max dev {dev:.2e}"))

    rng = stream(101, "roundtrip")
    x0 = rng.child("x0").normal((6, 6, 1))
    worst = 0.0
    for t in (1, sched.T // 2, sched.T):
        eps = rng.child("eps", t).normal((6, 6, 1))
        back = predict_x0(forward_sample(x0, t, eps, sched), eps, t, sched)
        worst = max(worst, float(_rel_err(back, x0).max()))
    out.append(CheckResult("schedule-algebra", "roundtrip-identity", worst < 1e-9,
                           f"max rel err {worst:.2e}"))

    mono = np.all(np.diff(sched.alpha_bars) < 0)
    out.append(CheckResult("schedule-algebra", "alpha-bar-decreasing", bool(mono)))
    tb = np.all(sched.tilde_betas <= sched.betas + 1e-15)
    out.append(CheckResult("schedule-algebra", "tilde-beta-bound", bool(tb)))

    t = max(2, sched.T // 2)
    v_lo = posterior_variance(0.0, t, sched)
    v_hi = posterior_variance(1.0, t, sched)
    v_mid = posterior_variance(0.5, t, sched)
    ok = (abs(v_lo - sched.tilde_beta(t)) < 1e-15 and abs(v_hi - sched.beta(t)) < 1e-15
          and abs(v_mid - np.sqrt(v_lo * v_hi)) < 1e-12)
    out.append(CheckResult("schedule-algebra", "variance-interpolation", ok))
    return out


def suite_masks() -> list[CheckResult]:
    out = []
    ok = all(make_fixed_mask(H, W, k).popcount == (H // k) * (W // k)
             for H, W, k in ((4, 4, 2), (6, 6, 3), (8, 8, 1), (32, 32, 2), (12, 8, 4)))
    out.append(CheckResult("masks", "popcount-formula", ok))

    fm = make_fixed_mask(16, 16, 2)
    base = stream(5, "base").normal((8, 8, 1))
    cond = project_initial_condition(base, fm)
    ok = np.array_equal(backtrack(cond, 2), base)
    out.append(CheckResult("masks", "project-backtrack-identity", ok))

    contained = True
    for i in range(200):
        am = mask_gen(cond.values, 2, 1.4, stream(7, "draw", i))
        if np.any(am.mask > fm.mask):
            contained = False
            break
    out.append(CheckResult("masks", "support-containment", contained))

    big = make_fixed_mask(200, 200, 2)
    p = np.full((100, 100), 0.5)
    am = bernoulli_mask(p, big, 2.0, stream(11, "rate"))
    frac = am.popcount / big.popcount
    out.append(CheckResult("masks", "bernoulli-rate",
                           abs(frac - 0.25) <= 0.02, f"rate {frac:.4f}"))

    flat = edge_probability_map(np.full((8, 8, 1), 0.3))
    out.append(CheckResult("masks", "degenerate-probability-map",
                           bool(np.all(flat.p == 0.0))))
    return out


def suite_oracle_moments() -> list[CheckResult]:
    out = []
    sched = build_linear_schedule(300, 1e-4, 0.04)
    mu0, var0 = 0.3, 0.36
    orc = GaussianOracleDenoiser(mu0=np.float64(mu0), var0=np.float64(var0), sched=sched)
    xs = sample_unconditional(orc, sched, (4000,), stream(21, "mc"))
    se = xs.std() / np.sqrt(len(xs))
    mean_ok = abs(xs.mean() - mu0) < 4 * se
    var_ok = abs(xs.var() - var0) / var0 < 0.08
    out.append(CheckResult("oracle-moments", "mean-recovery", bool(mean_ok),
                           f"mean {xs.mean():.4f} target {mu0}"))
    out.append(CheckResult("oracle-moments", "variance-recovery", bool(var_ok),
                           f"var {xs.var():.4f} target {var0}"))
    return out


def suite_gradients() -> list[CheckResult]:
    out = []
    sched = build_linear_schedule(40, 1e-3, 0.05)

    model = TinyDenoiser.create(channels=1, seed=3)
    x0 = stream(31, "x").normal((2, 8, 8, 1))
    ts = np.array([5, 33])
    eps = stream(31, "e").normal((2, 8, 8, 1))
    _, grads = noise_prediction_loss_and_grads(model.net, model.params, x0, ts, eps, sched)
    pos = sample_param_positions(model.params, 40, stream(32, "pos"))
    fd = finite_difference_grad(
        lambda p: noise_prediction_loss_and_grads(model.net, p, x0, ts, eps, sched,
                                                  want_grads=False)[0],
        model.params, pos)
    an = np.array([grads[n].reshape(-1)[i] for n, i in pos])
    err = float(_rel_err(fd, an).max())
    out.append(CheckResult("gradients", "denoiser-vs-finite-diff", err < 1e-4,
                           f"max rel err {err:.2e}"))

    crt = CrtModel.create(channels=1, k=2, seed=4)
    gt = stream(33, "g").normal((8, 8, 1)) * 0.4
    yT = np.zeros((8, 8, 1))
    yT[::2, ::2] = stream(33, "y").normal((4, 4, 1)) * 0.4
    prev = stream(33, "p").normal((8, 8, 1))
    batch = [CrtTrainSample(I_G=gt, y_T=yT, t=9, I_G_prev=prev),
             CrtTrainSample(I_G=-gt, y_T=yT, t=30, I_G_prev=0.5 * prev)]
    _, grads = crt_gradients(crt, batch, T=sched.T)  # also fills x_hat_crt
    pos = sample_param_positions(crt.params, 40, stream(34, "pos"))
    fd = finite_difference_grad(
        lambda p: crt_gradients(crt.with_params(p), batch, T=sched.T)[0],
        crt.params, pos)
    an = np.array([grads[n].reshape(-1)[i] for n, i in pos])
    err = float(_rel_err(fd, an).max())
    out.append(CheckResult("gradients", "corrector-vs-finite-diff", err < 1e-4,
                           f"max rel err {err:.2e}"))
    return out


def suite_degradation() -> list[CheckResult]:
    out = []
    img = stream(41, "img").normal((16, 16, 1)) * 0.3
    img = np.clip(img, -1, 1)
    identity = DegradationConfig()
    d1 = degrade(img, identity, stream(42, "d"))
    out.append(CheckResult("degradation", "identity-config-psnr",
                           metrics.psnr(d1, img) > 45.0,
                           f"psnr {metrics.psnr(d1, img):.1f} dB"))
    d2 = degrade(img, identity, stream(42, "d"))
    out.append(CheckResult("degradation", "seeded-determinism", np.array_equal(d1, d2)))

    ranges_ok = True
    for i in range(200):
        cfg = sample_severe_config(stream(43, "severe", i))
        r = SEVERE_RANGES
        if not (r["scale"][0] <= cfg.scale <= r["scale"][1]
                and r["blur_ksize"][0] <= cfg.blur_ksize <= r["blur_ksize"][1]
                and cfg.blur_ksize % 2 == 1
                and r["blur_sigma"][0] <= cfg.blur_sigma <= r["blur_sigma"][1]
                and r["jpeg_quality"][0] <= cfg.jpeg_quality <= r["jpeg_quality"][1]
                and r["noise_sigma"][0] <= cfg.noise_sigma <= r["noise_sigma"][1]):
            ranges_ok = False
            break
    out.append(CheckResult("degradation", "severe-ranges", ranges_ok))

    order = []
    degrade(img, DegradationConfig(blur_ksize=3, blur_sigma=0.8, scale=2,
                                   noise_sigma=5.0, jpeg_quality=80),
            stream(44, "o"), stage_hook=lambda name, x: order.append(name))
    out.append(CheckResult("degradation", "pipeline-order",
                           order == ["blur", "downsample", "noise", "jpeg", "upsample"],
                           "->".join(order)))
    return out


def suite_checkpoint() -> list[CheckResult]:
    out = []
    params = {"a.W": stream(51, "a").normal((3, 3, 2, 4)),
              "b.b": stream(51, "b").normal(7)}
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "test.ckpt"
        checkpoint.save_checkpoint(path, params)
        loaded = checkpoint.load_checkpoint(path)
        path2 = Path(td) / "test2.ckpt"
        checkpoint.save_checkpoint(path2, loaded)
        out.append(CheckResult("checkpoint", "roundtrip-bytes",
                               path.read_bytes() == path2.read_bytes()))
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            checkpoint.load_checkpoint(path)
            out.append(CheckResult("checkpoint", "corruption-detected", False))
        except DataError:
            out.append(CheckResult("checkpoint", "corruption-detected", True))
    return out


def suite_sampler() -> list[CheckResult]:
    out = []
    sched = build_linear_schedule(50, 1e-3, 0.08)
    orc = GaussianOracleDenoiser(mu0=np.float64(0.1), var0=np.float64(0.25), sched=sched)
    x0 = stream(61, "x0").normal((8, 8, 1)) * 0.4
    fm = make_fixed_mask(8, 8, 2)
    yT = project_initial_condition(x0[::2, ::2], fm)
    cfg = DpiConfig(tau=15, s=1.2, omega=40.0, k=2, steps=50, seed=9)
    tr = SampleTrace()
    a = dpi_sample(orc, FrozenCorrector(k=2), yT, cfg, sched, stream(9, "r"), trace=tr)
    b = dpi_sample(orc, FrozenCorrector(k=2), yT, cfg, sched, stream(9, "r"))
    out.append(CheckResult("sampler", "seeded-determinism", np.array_equal(a, b)))
    out.append(CheckResult("sampler", "one-denoiser-call-per-step",
                           tr.denoiser_calls == sched.T, f"{tr.denoiser_calls} calls"))
    stages = [r[1] for r in tr.rows]
    flips = sum(1 for u, v in zip(stages, stages[1:]) if u != v)
    out.append(CheckResult("sampler", "stage-exclusivity",
                           flips == 1 and stages[0] == "fcm" and stages[-1] == "racm"))
    w = tr.w_values
    out.append(CheckResult("sampler", "weight-bounds",
                           bool(np.all((w >= 0) & (w <= 1)))))

    xp = stream(62, "xp").normal((8, 8, 1))
    yp = stream(62, "yp").normal((8, 8, 1))
    comb = fcm_combine(xp, yp, fm)
    ok = np.array_equal(comb[fm.mask > 0.5], yp[fm.mask > 0.5]) and \
        np.array_equal(comb[fm.mask < 0.5], xp[fm.mask < 0.5])
    out.append(CheckResult("sampler", "pixel-preservation", ok))

    cfg0 = DpiConfig(tau=5, s=1.2, omega=30.0, k=2, sampler_kind="implicit",
                     steps=10, eta=0.0, seed=9)
    a = dpi_sample_ddim(orc, FrozenCorrector(k=2), yT, cfg0, sched, stream(10, "r"))
    b = dpi_sample_ddim(orc, FrozenCorrector(k=2), yT, cfg0, sched, stream(10, "r"))
    out.append(CheckResult("sampler", "ddim-eta0-determinism", np.array_equal(a, b)))
    return out


ALL_SUITES = [suite_schedule_algebra, suite_masks, suite_oracle_moments,
              suite_gradients, suite_degradation, suite_checkpoint, suite_sampler]


def run_all(schedule: NoiseSchedule | None = None) -> list[CheckResult]:
    results = []
    for fn in ALL_SUITES:
        if fn is suite_schedule_algebra:
            results.extend(fn(schedule))
        else:
            results.extend(fn())
    return results


def format_report(results: list[CheckResult]) -> tuple[str, bool]:
    lines = []
    all_ok = True
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        all_ok &= r.ok
        suffix = f" ({r.detail})" if r.detail else ""
        lines.append(f"{status} {r.suite}/{r.name}{suffix}")
    n_fail = sum(1 for r in results if not r.ok)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines), all_ok
