"""Command-line interface: train, denoise, eval, inspect, gradcheck, cka.

Exit codes: 0 ok, 1 check failed, 2 config/usage error, 3 data error,
4 numeric failure. ``CTNET_THREADS`` caps evaluation worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, build_id, load_checkpoint, save_checkpoint
from .complexity import PUBLISHED_FLOPS, PUBLISHED_PARAMS, count_parameters, estimate_flops, per_block
from .config import ConfigError, ModelConfig, NoiseSpec, RunConfig
from .gradcheck import model_gradcheck
from .data import PatchDataset, _as_channels, add_awgn, keyed_rng, resolve_dataset
from .imageio import ImageFormatError, load_image, quantize, save_image
from .metrics import cka_profile, denoise, evaluate, format_psnr, psnr
from .model import NumericFailure, init_params, params_from_numpy
from .training import train, write_log

log = logging.getLogger("ctnet")

EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4


class DataError(RuntimeError):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CTNET_THREADS", "1")))
    except ValueError:
        raise ConfigError("CTNET_THREADS must be an integer")


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_json(text)


def _model_from_args(args) -> ModelConfig:
    if getattr(args, "config", None) in ("tiny", "full"):
        cfg = ModelConfig.tiny() if args.config == "tiny" else ModelConfig.full()
    else:
        cfg = load_run_config(getattr(args, "config", None)).model
    if getattr(args, "tiny", False):
        cfg = ModelConfig.tiny(image_channels=cfg.image_channels)
    if getattr(args, "channels", None):
        cfg = cfg.replace(image_channels=args.channels)
    return cfg.validate()


def _images(spec: str, channels: int) -> list[tuple[str, np.ndarray]]:
    if not os.path.exists(spec):
        raise DataError(f"dataset not found: {spec}")
    try:
        entries = resolve_dataset(spec)
        imgs = [(Path(e["path"]).name, _as_channels(load_image(e["path"]), channels)) for e in entries]
    except (ImageFormatError, OSError, ValueError) as e:
        raise DataError(str(e)) from e
    if not imgs:
        raise DataError(f"no images found in {spec}")
    return imgs


def _load_ckpt(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    run = load_run_config(args.config)
    model = run.model
    train_cfg = run.train
    if args.tiny:
        model = ModelConfig.tiny(image_channels=model.image_channels)
        train_cfg = dataclasses.replace(train_cfg, patch_size=16)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
        overrides["halving_epochs"] = tuple(h for h in train_cfg.halving_epochs if h < args.epochs)
    if args.lr is not None:
        overrides["lr0"] = args.lr
    train_cfg = dataclasses.replace(train_cfg, **overrides).validate()
    noise = run.noise
    if args.blind is not None:
        noise = NoiseSpec.blind(args.blind[0], args.blind[1], seed=noise.seed)
    elif args.sigma is not None:
        noise = dataclasses.replace(noise, mode="fixed", sigma=args.sigma).validate()
    data = args.data or run.data
    out = Path(args.out or run.out or "runs/ctnet")
    if data is None:
        raise ConfigError("no training data given (--data or config 'data')")

    images = [img for _, img in _images(data, model.image_channels)]
    try:
        ds = PatchDataset.from_images(images, train_cfg.patch_size, train_cfg.patches_per_image,
                                      train_cfg.seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    order = keyed_rng(train_cfg.seed, 5).permutation(len(ds))
    n_val = min(train_cfg.val_count, len(ds) - 1)
    val = ds.clean[order[:n_val]] if n_val > 0 else None
    ds = PatchDataset(ds.clean[order[n_val:]])

    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "checkpoint.ctnt", out / "metrics.csv"
    (out / "run_config.json").write_text(json.dumps(
        RunConfig(model, train_cfg, noise, data, str(out)).to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("training %d patches (%d held out), %d params, noise %s", len(ds), n_val,
             count_parameters(model), noise)
    params = init_params(model, train_cfg.seed)
    try:
        result = train(params, model, ds, train_cfg, noise, val, ckpt_path, log_path)
    except KeyboardInterrupt:
        log.warning("interrupted; last completed epoch is in %s", ckpt_path)
        return 130
    write_log(result.log, log_path)
    save_checkpoint(ckpt_path, result.checkpoint(model, {"seed": train_cfg.seed, "build": build_id(model)}))
    print(f"checkpoint: {ckpt_path}\nmetrics: {log_path}")
    return 0


def cmd_denoise(args) -> int:
    ck = _load_ckpt(args.ckpt)
    try:
        img = load_image(args.input)
    except (ImageFormatError, OSError) as e:
        raise DataError(str(e)) from e
    if img.shape[0] != ck.config.image_channels:
        raise ConfigError(f"checkpoint expects {ck.config.image_channels}-channel images, "
                          f"input has {img.shape[0]}")
    params = params_from_numpy(ck.params)
    src = img
    if args.sigma is not None:
        src, _ = add_awgn(img, NoiseSpec(sigma=args.sigma), keyed_rng(args.seed, 0, int(round(args.sigma * 100))))
    out = denoise(src, params, ck.config)
    try:
        save_image(out, args.output)
    except ImageFormatError as e:
        raise ConfigError(str(e)) from e
    if args.sigma is not None:
        q = quantize(out).astype(np.float64) / 255.0
        qn = quantize(src).astype(np.float64) / 255.0
        print(f"noisy PSNR {format_psnr(psnr(qn, img))} dB, denoised PSNR {format_psnr(psnr(q, img))} dB")
    return 0


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --sigmas: {args.sigmas}") from e
    images = _images(args.dataset, ck.config.image_channels)
    name = args.name or Path(args.dataset).stem
    table = evaluate(params_from_numpy(ck.params), ck.config, images, sigmas, name, args.seed, _threads())
    text = table.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for (ds, s), v in table.averages().items():
        log.info("%s sigma=%g average PSNR %s dB", ds, s, format_psnr(v))
    return 0


def cmd_inspect(args) -> int:
    cfg = _model_from_args(args)
    h, w = args.size
    print(f"{'block':<10} {'params':>12} {'GFLOPs@%dx%d' % (h, w):>14}")
    for block, (p, f) in per_block(cfg, h, w).items():
        print(f"{block:<10} {p:>12,} {f / 1e9:>14.4f}")
    total, flops = count_parameters(cfg), estimate_flops(cfg, h, w)
    print(f"{'total':<10} {total:>12,} {flops / 1e9:>14.4f}")
    print(f"published reference: {PUBLISHED_PARAMS / 1e6:.2f}M params, {PUBLISHED_FLOPS / 1e9:.2f}G FLOPs; "
          f"this config {total / 1e6:.3f}M ({100 * (total / PUBLISHED_PARAMS - 1):+.1f}%)")
    if cfg.token_patch == 1:
        alt = cfg.replace(token_patch=3, window=max(2, 48 // 3), heads=12 if (cfg.width * 9) % 12 == 0 else cfg.heads)
        n = count_parameters(alt)
        print(f"with 3x3-patch tokens (embed {alt.embed_dim}, window {alt.window}): "
              f"{n / 1e6:.3f}M ({100 * (n / PUBLISHED_PARAMS - 1):+.1f}%)")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _model_from_args(args)
    report = model_gradcheck(cfg, args.coords, args.seed, args.size, h=args.h, tolerance=args.tol)
    print(report.summary())
    return 0 if report.passed and report.checked else EXIT_FAIL


def cmd_cka(args) -> int:
    ck = _load_ckpt(args.ckpt)
    images = [img for _, img in _images(args.images, ck.config.image_channels)]
    h = min(i.shape[1] for i in images)
    w = min(i.shape[2] for i in images)
    if args.crop:
        h, w = min(h, args.crop), min(w, args.crop)
    probes = np.stack([i[:, :h, :w] for i in images])
    prof = cka_profile(params_from_numpy(ck.params), ck.config, probes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cka_matrix.csv").write_text(prof.to_csv())
    (out / "cka_ratios.csv").write_text(prof.ratios_csv())
    (out / "cka_heatmap.pgm").write_bytes(prof.heatmap_pgm())
    if prof.degenerate:
        log.warning("zero-variance layers (CKA undefined): %s", ", ".join(prof.degenerate))
    print(f"{len(prof.names)}x{len(prof.names)} CKA matrix written to {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", help="manifest JSON or image directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sigma", type=float, help="fixed noise level (8-bit units)")
    g.add_argument("--blind", type=float, nargs=2, metavar=("LO", "HI"), help="blind noise range")
    p.add_argument("--tiny", action="store_true", help="desk-scale model (C=8, window 4, 2 heads, 16x16 patches)")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--sigma", type=float, help="add synthetic noise first and report PSNR")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR table over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="manifest JSON or image directory")
    p.add_argument("--sigmas", default="15,25,50")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--name", help="dataset label in the CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="parameter and FLOP counts")
    p.add_argument("--config", help="JSON run config, or 'tiny' / 'full'")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--size", type=int, nargs=2, default=(48, 48), metavar=("H", "W"))
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default="tiny", help="JSON run config, or 'tiny' / 'full'")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cka", help="layer CKA similarity profile")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="probe image directory or manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--crop", type=int, help="crop probes to at most this side length")
    p.set_defaults(func=cmd_cka)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
