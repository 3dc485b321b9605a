"""Command-line surface: dataset synthesis, degradation, training, restoration.

Commands:
    make-dataset    procedural toy faces or Gaussian pixel data -> PGM dir
    degrade         run the blind degradation pipeline over images
    train-denoiser  fit the tiny noise predictor, write checkpoint + loss CSV
    train-crt       fit the condition corrector likewise
    restore         two-stage masked sampling over degraded inputs
    eval            PSNR / SSIM / grid-MSE report as CSV
    selftest        run the built-in invariant checks

Every command takes --seed and is byte-reproducible for a fixed seed; the
fully resolved configuration is written as a manifest next to the outputs
only after the inputs validate.  Exit codes: 0 ok, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import parse_config_file, write_manifest
from .corrector import (ConditionSynthesis, CrtModel, CrtTrainConfig,
                        FrozenCorrector, train_crt)
from .degradation import DegradationConfig, degrade, resize_bicubic, sample_severe_config
from .denoisers import (DenoiserTrainConfig, GaussianOracleDenoiser, TinyDenoiser,
                        train_tiny_denoiser)
from .errors import DataError, DpiError, NumericalError, ParameterError
from .masks import make_fixed_mask, project_initial_condition
from .metrics import MetricReport, grid_mse, psnr, ssim
from .pnm import read_image, write_image
from .rng import stream
from .sampler import DpiConfig, SampleTrace, dpi_sample, dpi_sample_ddim
from .schedule import (DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
                       build_linear_schedule)
from . import datasets, selftest


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems -> exit code 1, not argparse's 2
        raise ParameterError(message)


def _collect_inputs(path_str: str) -> list[Path]:
    p = Path(path_str)
    if p.is_dir():
        files = sorted(list(p.glob("*.pgm")) + list(p.glob("*.ppm")))
        if not files:
            raise DataError(f"no PGM/PPM images under {p}")
        return files
    if p.is_file():
        return [p]
    raise DataError(f"input path does not exist: {p}")


def _schedule_from_args(args):
    return build_linear_schedule(args.timesteps, args.beta_start, args.beta_end)


def _add_schedule_args(p):
    p.add_argument("--timesteps", type=int, default=DEFAULT_T)
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)


DEGRADE_SCHEMA = {
    "blur_ksize": int, "blur_sigma": float, "scale": int, "noise_sigma": float,
    "jpeg_quality": int, "downsample_method": str, "seed": int,
}


def cmd_make_dataset(args) -> int:
    if args.kind == "faces":
        images = datasets.make_face_dataset(args.count, args.seed, size=args.size)
    else:
        mu0 = np.full((args.size, args.size, 1), args.gaussian_mean)
        var0 = np.full((args.size, args.size, 1), args.gaussian_var)
        images = datasets.make_gaussian_dataset(mu0, var0, args.count, args.seed)
    lines = [f"kind = {args.kind}", f"count = {args.count}", f"seed = {args.seed}",
             f"size = {args.size}"]
    datasets.write_image_dir(args.out, images, lines)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


DEGRADE_DEFAULTS = {"blur_ksize": 1, "blur_sigma": 0.0, "scale": 1,
                    "noise_sigma": 0.0, "jpeg_quality": 100,
                    "downsample_method": "pool", "seed": 0}


def cmd_degrade(args) -> int:
    # precedence: defaults < config file < explicitly passed flags
    values = dict(DEGRADE_DEFAULTS)
    if args.config:
        values.update(parse_config_file(args.config, DEGRADE_SCHEMA))
    for k in DEGRADE_DEFAULTS:
        flag_value = getattr(args, k)
        if flag_value is not None:
            values[k] = flag_value
    seed = values.pop("seed")
    inputs = _collect_inputs(args.input)
    images = [read_image(f) for f in inputs]  # validate before writing anything

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = DegradationConfig(**{k: values[k] for k in values})
    for i, (f, img) in enumerate(zip(inputs, images)):
        if args.severe:
            cfg = sample_severe_config(stream(seed, "severe", i))
        low = degrade(img, cfg, stream(seed, "degrade", i))
        write_image(low, out_dir / f.name)
    manifest = {**values, "seed": seed, "severe": args.severe,
                "inputs": ",".join(f.name for f in inputs)}
    write_manifest(out_dir / "manifest.txt", manifest)
    print(f"degraded {len(inputs)} image(s) into {out_dir}")
    return 0


def _write_loss_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for epoch, step_i, loss in history:
            w.writerow([epoch, step_i, f"{loss:.12g}"])


def cmd_train_denoiser(args) -> int:
    images = datasets.load_image_dir(args.data)
    sched = _schedule_from_args(args)
    cfg = DenoiserTrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                              epochs=args.epochs, ema_decay=args.ema_decay,
                              seed=args.seed, dtype=args.dtype,
                              base_width=args.base_width)
    result = train_tiny_denoiser(images, sched, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.ema_model.save(out)
    result.model.save(out.with_suffix(out.suffix + ".raw"))
    _write_loss_csv(out.with_suffix(out.suffix + ".loss.csv"), result.history)
    write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), {
        "data": args.data, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "ema_decay": args.ema_decay, "seed": args.seed,
        "dtype": args.dtype, "base_width": args.base_width,
        "timesteps": args.timesteps, "beta_start": args.beta_start,
        "beta_end": args.beta_end,
    })
    print(f"trained denoiser ({result.model.param_count} params), "
          f"final loss {result.history[-1][2]:.4f} -> {out}")
    return 0


def cmd_train_crt(args) -> int:
    images = datasets.load_image_dir(args.data)
    sched = _schedule_from_args(args)
    if args.synthesis == "pipeline":
        deg = DegradationConfig(blur_ksize=args.blur_ksize, blur_sigma=args.blur_sigma,
                                scale=args.scale, noise_sigma=args.noise_sigma,
                                jpeg_quality=args.jpeg_quality)
        syn = ConditionSynthesis(k=args.stride, kind="pipeline", degradation=deg)
    else:
        syn = ConditionSynthesis(k=args.stride, kind="bicubic", scale=args.scale)
    cfg = CrtTrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, ema_decay=args.ema_decay,
                         seed=args.seed, dtype=args.dtype,
                         base_width=args.base_width, synthesis=syn)
    result = train_crt(images, sched, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.ema_model.save(out)
    result.model.save(out.with_suffix(out.suffix + ".raw"))
    _write_loss_csv(out.with_suffix(out.suffix + ".loss.csv"), result.history)
    write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), {
        "data": args.data, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "ema_decay": args.ema_decay, "seed": args.seed,
        "dtype": args.dtype, "base_width": args.base_width, "stride": args.stride,
        "synthesis": args.synthesis, "scale": args.scale,
        "timesteps": args.timesteps, "beta_start": args.beta_start,
        "beta_end": args.beta_end,
    })
    print(f"trained corrector ({result.model.param_count} params), "
          f"final loss {result.history[-1][2]:.4f} -> {out}")
    return 0


def _parse_oracle_spec(spec: str, sched) -> GaussianOracleDenoiser:
    try:
        fields = dict(part.split("=", 1) for part in spec.split(":", 1)[1].split(","))
        mu = float(fields["mu"])
        var = float(fields["var"])
    except (KeyError, ValueError) as exc:
        raise ParameterError(f"bad oracle spec {spec!r}; want oracle:mu=<f>,var=<f>") from exc
    return GaussianOracleDenoiser(mu0=np.float64(mu), var0=np.float64(var), sched=sched)


def cmd_restore(args) -> int:
    inputs = _collect_inputs(args.input)
    images = [read_image(f) for f in inputs]
    sched = _schedule_from_args(args)

    if args.denoiser.startswith("oracle:"):
        denoiser = _parse_oracle_spec(args.denoiser, sched)
    else:
        denoiser = TinyDenoiser.load(args.denoiser)
    if args.crt == "none":
        crt = FrozenCorrector(k=args.stride)
    else:
        crt = CrtModel.load(args.crt)
        if crt.k != args.stride:
            raise ParameterError(f"corrector was trained for stride {crt.k}, "
                                 f"but --stride is {args.stride}")

    steps = args.steps if args.steps else sched.T
    cfg = DpiConfig(tau=args.tau, s=args.mask_exponent, omega=args.omega,
                    k=args.stride, sampler_kind=args.sampler, steps=steps,
                    eta=args.eta, seed=args.seed, sigma_form=args.sigma_form,
                    clip_x0=args.clip_x0)
    cfg.validate()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (f, img) in enumerate(zip(inputs, images)):
        if args.pre_upscale > 1:
            img = resize_bicubic(img, img.shape[0] * args.pre_upscale,
                                 img.shape[1] * args.pre_upscale)
        H, W = img.shape[:2]
        fm = make_fixed_mask(H, W, cfg.k)
        base = resize_bicubic(img, H // cfg.k, W // cfg.k)
        y_T = project_initial_condition(base, fm)
        run_rng = stream(cfg.seed, "image", i)
        trace = SampleTrace(every=max(1, steps // 16)) if args.trace else None
        if cfg.sampler_kind == "ancestral":
            sr = dpi_sample(denoiser, crt, y_T, cfg, sched, run_rng, trace=trace)
        else:
            sr = dpi_sample_ddim(denoiser, crt, y_T, cfg, sched, run_rng, trace=trace)
        write_image(sr, out_dir / f.name)
        if trace is not None:
            trace.dump(Path(args.trace) / f.stem)
    write_manifest(out_dir / "manifest.txt", {
        "denoiser": args.denoiser, "crt": args.crt, "sampler": cfg.sampler_kind,
        "steps": steps, "eta": cfg.eta, "tau": cfg.tau, "s": cfg.s,
        "omega": cfg.omega, "stride": cfg.k, "seed": cfg.seed,
        "sigma_form": cfg.sigma_form, "clip_x0": cfg.clip_x0,
        "pre_upscale": args.pre_upscale,
        "timesteps": args.timesteps, "beta_start": args.beta_start,
        "beta_end": args.beta_end, "inputs": ",".join(f.name for f in inputs),
    })
    print(f"restored {len(inputs)} image(s) into {out_dir}")
    return 0


def cmd_eval(args) -> int:
    sr_files = _collect_inputs(args.sr)
    gt_files = _collect_inputs(args.gt)
    if len(sr_files) != len(gt_files):
        raise DataError(f"pair count mismatch: {len(sr_files)} SR vs {len(gt_files)} GT")
    report = MetricReport()
    for sf, gf in zip(sr_files, gt_files):
        a = read_image(sf)
        b = read_image(gf)
        fm = make_fixed_mask(a.shape[0], a.shape[1], args.stride)
        report.add(sf.name, psnr=psnr(a, b), ssim=ssim(a, b),
                   grid_mse=grid_mse(a, b, fm))
    report.write_csv(args.out)
    agg = report.aggregate()
    print(f"{len(report.rows)} pairs; mean psnr {agg['psnr']:.3f} dB, "
          f"mean ssim {agg['ssim']:.4f} -> {args.out}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run_all()
    text, ok = selftest.format_report(results)
    print(text)
    return 0 if ok else 3


def build_parser() -> _Parser:
    p = _Parser(prog="dpi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-dataset", help="generate a procedural toy dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--kind", choices=("faces", "gaussian"), default="faces")
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--gaussian-mean", type=float, default=0.0)
    d.add_argument("--gaussian-var", type=float, default=0.25)
    d.set_defaults(func=cmd_make_dataset)

    d = sub.add_parser("degrade", help="apply the blind degradation pipeline")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config", default=None, help="key=value file (flags override)")
    d.add_argument("--blur-ksize", type=int, default=None)
    d.add_argument("--blur-sigma", type=float, default=None)
    d.add_argument("--scale", type=int, default=None)
    d.add_argument("--noise-sigma", type=float, default=None)
    d.add_argument("--jpeg-quality", type=int, default=None)
    d.add_argument("--downsample-method", choices=("pool", "bicubic"), default=None)
    d.add_argument("--severe", action="store_true",
                   help="draw per-image parameters from the severe ranges")
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(func=cmd_degrade)

    for name, fn in (("train-denoiser", cmd_train_denoiser), ("train-crt", cmd_train_crt)):
        d = sub.add_parser(name, help=f"{name.replace('-', ' ')} on an image directory")
        d.add_argument("--data", required=True)
        d.add_argument("--out", required=True)
        d.add_argument("--epochs", type=int, default=5)
        d.add_argument("--batch-size", type=int, default=8)
        d.add_argument("--lr", type=float, default=1e-4)
        d.add_argument("--ema-decay", type=float, default=0.9999)
        d.add_argument("--seed", type=int, default=0)
        d.add_argument("--dtype", choices=("float64", "float32"), default="float64")
        d.add_argument("--base-width", type=int, default=32)
        _add_schedule_args(d)
        if name == "train-crt":
            d.add_argument("--stride", type=int, default=2)
            d.add_argument("--synthesis", choices=("bicubic", "pipeline"), default="bicubic")
            d.add_argument("--scale", type=int, default=4)
            d.add_argument("--blur-ksize", type=int, default=7)
            d.add_argument("--blur-sigma", type=float, default=1.5)
            d.add_argument("--noise-sigma", type=float, default=10.0)
            d.add_argument("--jpeg-quality", type=int, default=70)
        d.set_defaults(func=fn)

    d = sub.add_parser("restore", help="two-stage masked sampling restoration")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--denoiser", required=True,
                   help="checkpoint path or oracle:mu=<f>,var=<f>")
    d.add_argument("--crt", default="none", help="checkpoint path or 'none'")
    d.add_argument("--sampler", choices=("ancestral", "implicit"), default="ancestral")
    d.add_argument("--steps", type=int, default=0,
                   help="implicit steps (defaults to the full schedule)")
    d.add_argument("--eta", type=float, default=0.1)
    d.add_argument("--tau", type=int, default=300)
    d.add_argument("--mask-exponent", type=float, default=1.2, dest="mask_exponent")
    d.add_argument("--omega", type=float, default=750.0)
    d.add_argument("--stride", type=int, default=2)
    d.add_argument("--sigma-form", choices=("printed", "canonical"), default="printed")
    d.add_argument("--clip-x0", action="store_true",
                   help="clamp clean estimates to [-1, 1] during sampling")
    d.add_argument("--pre-upscale", type=int, default=1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--trace", default=None, help="directory for per-step snapshots")
    _add_schedule_args(d)
    d.set_defaults(func=cmd_restore)

    d = sub.add_parser("eval", help="full-reference metrics over SR/GT pairs")
    d.add_argument("--sr", required=True)
    d.add_argument("--gt", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--stride", type=int, default=2)
    d.set_defaults(func=cmd_eval)

    d = sub.add_parser("selftest", help="run built-in invariant checks")
    d.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DpiError as exc:  # pragma: no cover - catch-all for subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    console_main()
