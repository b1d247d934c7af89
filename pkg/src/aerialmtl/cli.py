"""Command-line entry point: train, predict, evaluate, uncertainty, make-height, synth.

Every failure exits with the category code of the error that caused it, so a
calling script can tell a corrupt checkpoint (8) from a bad config (4).
"""

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import MtlError
from .geodata import (
    height_from_dsm_dem,
    read_raster,
    resample,
    synth_scene,
    write_manifest,
    write_raster,
)
from .inference import mc_dropout_uncertainty, render_maps, tiled_predict
from .metrics import evaluate, write_report
from .train import load_model, train, window_from_config

log = logging.getLogger("aerialmtl")

IO_ERROR_CODE = 11


def _add_config_flags(p, exclude=()):
    for f in fields(RunConfig):
        if f.name in exclude:
            continue
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        p.add_argument(*flags, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                       help=f"override {f.name} (default {f.default!r})")


def _overrides(args):
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def cmd_train(args):
    overrides = _overrides(args)
    cfg = RunConfig.load(args.config, overrides) if args.config else RunConfig.from_mapping(overrides)
    if args.config and cfg.manifest and not Path(cfg.manifest).is_absolute() and "manifest" not in overrides:
        cfg = cfg.replace(manifest=str(Path(args.config).parent / cfg.manifest))
    if not cfg.manifest:
        raise MtlError("no manifest given; set manifest= in the config or pass --manifest")

    def progress(it, row):
        if it % args.log_every == 0 or it == cfg.iterations:
            log.info("iter %d  loss_height=%.4f  loss_sem=%.4f  k=(%.3f, %.3f)", *row[:5])

    result = train(cfg, args.out, progress=progress)
    print(result.checkpoint)
    return 0


def _scale(raster, factor):
    return raster if factor == 1.0 else resample(raster, factor)


def cmd_predict(args):
    model, cfg = load_model(args.checkpoint)
    win = window_from_config(cfg, args.window, args.stride, args.sigma)
    rgb = read_raster(args.rgb, "rgb")
    height, labels, _ = tiled_predict(model, rgb, win, batch_size=args.batch_size)
    scale = cfg.output_scale if args.output_scale is None else args.output_scale
    height, labels = _scale(height, scale), _scale(labels, scale)
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_raster(height, f"{prefix}_height.pfm")
    write_raster(labels, f"{prefix}_labels.pgm")
    write_raster(render_maps(height, legend_path=f"{prefix}_height_legend.txt"), f"{prefix}_height.ppm")
    write_raster(render_maps(labels, legend_path=f"{prefix}_labels_legend.txt"), f"{prefix}_labels.ppm")
    print(f"{prefix}_height.pfm")
    print(f"{prefix}_labels.pgm")
    return 0


def cmd_evaluate(args):
    if not (args.pred_height and args.gt_height) and not (args.pred_labels and args.gt_labels):
        raise MtlError("need --pred-height/--gt-height and/or --pred-labels/--gt-labels")
    kw = {}
    if args.pred_height and args.gt_height:
        kw.update(pred_height=read_raster(args.pred_height, "height"), gt_height=read_raster(args.gt_height, "height"))
    if args.pred_labels and args.gt_labels:
        kw.update(pred_labels=read_raster(args.pred_labels, "labels"), gt_labels=read_raster(args.gt_labels, "labels"))
    report = evaluate(num_classes=args.num_classes, **kw)
    if args.out:
        write_report(report, args.out)
    for k, v in report.items():
        print(f"{k}={v}")
    return 0


def cmd_uncertainty(args):
    model, cfg = load_model(args.checkpoint)
    win = window_from_config(cfg, args.window, args.stride, args.sigma)
    samples = cfg.mc_samples if args.samples is None else args.samples
    seed = cfg.seed if args.seed is None else args.seed
    rgb = read_raster(args.rgb, "rgb")
    mean, std = mc_dropout_uncertainty(model, rgb, win, samples, np.random.default_rng(seed), args.batch_size)
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_raster(mean, f"{prefix}_mean.pfm")
    write_raster(std, f"{prefix}_std.pfm")
    write_raster(render_maps(std, legend_path=f"{prefix}_std_legend.txt"), f"{prefix}_std.ppm")
    print(f"{prefix}_std.pfm")
    return 0


def cmd_make_height(args):
    dsm = read_raster(args.dsm, "dsm")
    dem = read_raster(args.dem, "dem")
    write_raster(height_from_dsm_dem(dsm, dem, clamp_negative=not args.keep_negative), args.out)
    print(args.out)
    return 0


def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    triples = []
    for seed in range(args.seed, args.seed + args.count):
        rgb, height, labels = synth_scene(seed, args.size, args.num_classes)
        paths = (out / f"scene{seed}_rgb.ppm", out / f"scene{seed}_height.pfm", out / f"scene{seed}_labels.pgm")
        for raster, p in zip((rgb, height, labels), paths):
            write_raster(raster, p)
        triples.append(paths)
    manifest = out / "manifest.txt"
    write_manifest(manifest, triples)
    print(manifest)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="aerialmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest of tiles")
    p.add_argument("config", nargs="?", help="key=value run config file")
    p.add_argument("--out", required=True, help="directory for checkpoint.mtl and loss_log.csv")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    def window_flags(q):
        q.add_argument("--window", type=int, help="window size (default from checkpoint, 1024)")
        q.add_argument("--stride", type=int, help="window stride (default from checkpoint, 256)")
        q.add_argument("--sigma", type=float, help="Gaussian sigma; 0 means window/4")
        q.add_argument("--batch-size", type=int, default=4, help="windows per forward pass")

    p = sub.add_parser("predict", help="stitched height and label maps for one RGB tile")
    p.add_argument("checkpoint")
    p.add_argument("rgb", help="P6 PPM image")
    p.add_argument("out_prefix")
    window_flags(p)
    p.add_argument("--output-scale", "--output_scale", type=float, help="resample outputs by this factor")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="height errors and OA/AA/kappa against ground truth")
    p.add_argument("--pred-height")
    p.add_argument("--gt-height")
    p.add_argument("--pred-labels")
    p.add_argument("--gt-labels")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", help="key=value report file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("uncertainty", help="MC-dropout height std map")
    p.add_argument("checkpoint")
    p.add_argument("rgb")
    p.add_argument("out_prefix")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    window_flags(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("make-height", help="height above ground as DSM - DEM")
    p.add_argument("dsm")
    p.add_argument("dem")
    p.add_argument("out")
    p.add_argument("--keep-negative", action="store_true", help="do not clamp negative heights to 0")
    p.set_defaults(func=cmd_make_height)

    p = sub.add_parser("synth", help="write synthetic tiles and a manifest")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--num-classes", type=int, default=6)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MtlError as exc:
        print(f"aerialmtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"aerialmtl {args.command}: {exc}", file=sys.stderr)
        return IO_ERROR_CODE


if __name__ == "__main__":
    sys.exit(main())
