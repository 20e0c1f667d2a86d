"""Command-line entry points: fit, render, compress, decompress, eval, splat-demo.

Every subcommand reads and writes files only. Errors (missing files, bad
flags, malformed configs or containers) print a one-line message to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys

from . import codec, metrics
from .imageio import HdrImage, ImageFormatError, load_image, save_image, tonemap, write_png16
from .model import MeshModel, render
from .splat2d import Scene, read_scene, render_deferred
from .trainer import (ConfigError, TrainConfig, TrainingDiverged, config_types, fit_image, fit_splats,
                      json_logger, load_config, parse_overrides)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

_CFG_PREFIX = "cfg_"


class CliError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------------

def _render_model(model) -> HdrImage:
    if isinstance(model, MeshModel):
        return render(model)
    if isinstance(model, Scene):
        return render_deferred(model.splats, model.decoder(), model.width, model.height, model.sh_scale,
                               model.focal, model.mulaw)
    raise CliError(f"cannot render {type(model).__name__}")


def _write_image(path, img: HdrImage, tonemap_path=None):
    save_image(path, img)
    if tonemap_path:
        write_png16(tonemap_path, tonemap(img))


def _config_from_args(args) -> TrainConfig:
    overrides = list(args.set or [])
    for name in config_types():
        val = getattr(args, _CFG_PREFIX + name, None)
        if val is not None:
            overrides.append(f"{name}={val}")
    if args.config:
        return load_config(args.config, overrides)
    return parse_overrides(overrides).validate()


def format_table(name, row):
    """One-row metric table in the PSNR_mu / PSNR_tm / SSIM_tm (+ PSNR_lin) layout."""
    def num(v, digits):
        return "inf" if math.isinf(v) else f"{v:.{digits}f}"
    head = f"{'model':<24} {'PSNR_mu':>9} {'PSNR_tm':>9} {'SSIM_tm':>9} {'PSNR_lin':>9}"
    body = (f"{name:<24} {num(row['psnr_mu'], 2):>9} {num(row['psnr_tm'], 2):>9} "
            f"{num(row['ssim_tm'], 4):>9} {num(row['psnr_lin'], 2):>9}")
    return head + "\n" + body


# -- subcommands -----------------------------------------------------------------------------

def cmd_fit(args):
    cfg = _config_from_args(args)
    img = load_image(args.image, cfg.white_level)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.jsonl"
    with open(log_path, "w") as fh:
        log_fn = json_logger(fh)
        if args.mode == "mesh":
            model = fit_image(img, cfg, log_fn=log_fn, threads=args.threads).model
        else:
            res = fit_splats(img, cfg, log_fn=log_fn, threads=args.threads)
            model = Scene(res.splats, res.width, res.height, cfg.hidden_width, cfg.hidden_layers, cfg.seed,
                          res.sh_scale, None, res.mlp, cfg.white_level, cfg.mu)
    n = codec.save(args.out, model, codec.FLOAT)
    print(f"wrote {args.out} ({n} bytes), log {log_path}")


def cmd_render(args):
    model = codec.load(args.model)
    _write_image(args.out, _render_model(model), args.tonemap)
    print(f"wrote {args.out}")


def cmd_compress(args):
    try:
        flags = codec.parse_quantize(args.quantize)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    model = codec.load(args.model)
    before = os.path.getsize(args.model)
    n = codec.save(args.out, model, flags)
    print(f"wrote {args.out} ({n} bytes, {before / n:.2f}x smaller than the input)")


def cmd_decompress(args):
    model = codec.load(args.model)
    n = codec.save(args.out, model, codec.FLOAT)
    print(f"wrote {args.out} ({n} bytes)")


def cmd_eval(args):
    model = codec.load(args.model)
    pred = _render_model(model)
    ref = load_image(args.reference, pred.white_level)
    if ref.data.shape != pred.data.shape:
        raise CliError(f"reference is {ref.width}x{ref.height}, model renders {pred.width}x{pred.height}")
    row = metrics.evaluate(pred, ref)
    if args.json:
        print(json.dumps({"model": args.model, **{k: float(v) for k, v in row.items()}}))
    else:
        print(format_table(os.path.basename(args.model), row))


def cmd_splat_demo(args):
    scene = read_scene(args.scene)
    _write_image(args.out, _render_model(scene), args.tonemap)
    if args.save_model:
        codec.save(args.save_model, scene, codec.LOSSLESS)
    print(f"wrote {args.out} ({len(scene.splats)} splats)")


# -- parser ----------------------------------------------------------------------------------

def _add_config_flags(p):
    g = p.add_argument_group("training config overrides (see TrainConfig)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=_CFG_PREFIX + f.name, metavar="V", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="nht", description="Neural harmonic textures for HDR images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a model on an image")
    p.add_argument("image")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output .nht container")
    p.add_argument("--mode", choices=("mesh", "splat"), default="mesh")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--threads", type=int, help="BLAS thread cap (default: NHT_THREADS or unlimited)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a model to .pfm or .png")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--tonemap", metavar="PNG", help="also write a tonemapped 16-bit PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compress", help="quantize and entropy-code a model")
    p.add_argument("model")
    p.add_argument("--quantize", default="int8,uint16,fp16", help="comma list of int8,uint16,fp16[,raw]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rewrite a model as an uncompressed float container")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="metrics of a model against a reference image")
    p.add_argument("model")
    p.add_argument("reference")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("splat-demo", help="render a hand-written splat scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tonemap", metavar="PNG")
    p.add_argument("--save-model", metavar="NHT", help="also store the scene as a container")
    p.set_defaults(func=cmd_splat_demo)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"nht: error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_ERROR
    except (CliError, ConfigError, ImageFormatError, codec.ContainerError, TrainingDiverged,
            ValueError, OSError) as exc:
        print(f"nht: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main():
    sys.exit(run())
