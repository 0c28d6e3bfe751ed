"""Command-line surface: train, sample, grid, interp, styleviz, eval, inspect.

Every command is a pure function of its flags, config file, checkpoint, and
seed. Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from dualfusion.checkpoint import CheckpointError, load_checkpoint
from dualfusion.conditioning import StyleExtractor, style_stat_distance
from dualfusion.config import ConfigError, RunConfig, load_config, parse_config
from dualfusion.ppm import ImageBuffer, PpmError, image_to_model, model_to_image, read_pgm, read_ppm, write_ppm
from dualfusion.sampling import (
    GuidanceScales,
    SamplerSpec,
    interpolate_styles,
    spatial_blend,
    style_visualize,
    stylize,
)
from dualfusion.tensor import NumericError
from dualfusion.training import TrainingDiverged, load_model_from_checkpoint, run_training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_image(path):
    try:
        return image_to_model(read_ppm(path))
    except FileNotFoundError as exc:
        raise CliError(f"cannot read image: {exc}", EXIT_IO) from exc


def _write_image(path, array):
    write_ppm(path, model_to_image(array))


def _load_model(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required", EXIT_USAGE)
    try:
        model, ckpt = load_model_from_checkpoint(args.checkpoint, use_ema=True)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return model, ckpt


def _sampler_spec(args, cfg, seed):
    steps = args.steps if args.steps else cfg.sample_steps
    kind = args.sampler if args.sampler else cfg.sampler
    return SamplerSpec(kind=kind, steps=steps, seed=seed, variance=cfg.variance)


def _scales(args, cfg):
    if args.scales:
        parts = args.scales.split(",")
        if len(parts) != 2:
            raise CliError(f"--scales wants s_cnt,s_sty, got {args.scales!r}", EXIT_USAGE)
        try:
            return GuidanceScales(float(parts[0]), float(parts[1]))
        except ValueError as exc:
            raise CliError(f"bad --scales: {exc}", EXIT_USAGE) from exc
    return GuidanceScales(cfg.scale_content, cfg.scale_style)


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.train_seed = args.seed
    outdir = args.out or "run"
    run_training(cfg, outdir, log=lambda msg: print(msg, flush=True))
    print(f"training complete; checkpoints and loss_log.csv in {outdir}")
    return EXIT_OK


def cmd_sample(args):
    model, _ = _load_model(args)
    cfg = model.config
    content = _load_image(args.content)
    styles = args.style or []
    if not styles:
        raise CliError("--style is required", EXIT_USAGE)
    spec = _sampler_spec(args, cfg, args.seed)
    scales = _scales(args, cfg)
    if args.mask:
        if len(styles) != 2:
            raise CliError("--mask needs exactly two --style images", EXIT_USAGE)
        mask = read_pgm(args.mask)
        out = spatial_blend(
            model, content, _load_image(styles[0]), _load_image(styles[1]), mask, scales, spec
        )
    else:
        if len(styles) != 1:
            raise CliError("sample takes one --style (use interp for mixes)", EXIT_USAGE)
        out = stylize(model, content, _load_image(styles[0]), scales, spec)
    _write_image(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_styleviz(args):
    model, _ = _load_model(args)
    styles = args.style or []
    if len(styles) != 1:
        raise CliError("styleviz takes exactly one --style", EXIT_USAGE)
    spec = _sampler_spec(args, model.config, args.seed)
    out = style_visualize(model, _load_image(styles[0]), spec)
    _write_image(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_interp(args):
    model, _ = _load_model(args)
    styles = args.style or []
    if len(styles) < 2:
        raise CliError("interp needs at least two --style images", EXIT_USAGE)
    if not args.weights:
        raise CliError("--weights is required for interp", EXIT_USAGE)
    try:
        weights = [float(w) for w in args.weights.split(",")]
    except ValueError as exc:
        raise CliError(f"bad --weights: {exc}", EXIT_USAGE) from exc
    if len(weights) != len(styles):
        raise CliError(
            f"{len(styles)} styles but {len(weights)} weights", EXIT_USAGE
        )
    content = _load_image(args.content)
    mix = [(_load_image(s), w) for s, w in zip(styles, weights)]
    spec = _sampler_spec(args, model.config, args.seed)
    out = interpolate_styles(model, content, mix, _scales(args, model.config), spec)
    _write_image(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _grid_cells(model, content, style, args, cfg):
    content_scales = (
        [float(v) for v in args.content_scales.split(",")]
        if args.content_scales
        else list(cfg.grid_content_scales)
    )
    style_scales = (
        [float(v) for v in args.style_scales.split(",")]
        if args.style_scales
        else list(cfg.grid_style_scales)
    )
    cells = []
    for j, sc in enumerate(content_scales):
        cells.append((0, j, GuidanceScales(sc, cfg.scale_style)))
    for j, ss in enumerate(style_scales):
        cells.append((1, j, GuidanceScales(cfg.scale_content, ss)))
    return cells, len(content_scales), len(style_scales)


def cmd_grid(args):
    model, _ = _load_model(args)
    cfg = model.config
    content = _load_image(args.content)
    styles = args.style or []
    if len(styles) != 1:
        raise CliError("grid takes exactly one --style", EXIT_USAGE)
    style = _load_image(styles[0])
    os.makedirs(args.out, exist_ok=True)
    cells, n_cnt, n_sty = _grid_cells(model, content, style, args, cfg)

    def render(cell):
        index, (row, col, scales) = cell
        spec = _sampler_spec(args, cfg, args.seed + index)
        return row, col, stylize(model, content, style, scales, spec)

    workers = int(os.environ.get("DUALFUSION_THREADS", "0")) or min(4, len(cells))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(render, enumerate(cells)))

    size = model.config.image_size
    width = max(n_cnt, n_sty)
    montage = np.zeros((3, 2 * size, width * size))
    for row, col, img in results:
        _write_image(os.path.join(args.out, f"cell_r{row}_c{col}.ppm"), img)
        montage[:, row * size : (row + 1) * size, col * size : (col + 1) * size] = img
    _write_image(os.path.join(args.out, "montage.ppm"), montage)
    print(f"wrote {len(results)} cells and montage to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    extractor = StyleExtractor(
        channels=cfg.extractor_channels, kernel=cfg.extractor_kernel, seed=cfg.extractor_seed
    )
    a = _load_image(args.images[0])
    b = _load_image(args.images[1])
    if a.shape != b.shape:
        raise CliError(f"image sizes differ: {a.shape} vs {b.shape}", EXIT_USAGE)
    d = style_stat_distance(extractor.extract(a), extractor.extract(b))
    print(f"{d!r}")
    return EXIT_OK


def cmd_inspect(args):
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    print(f"iteration: {ckpt.iteration}")
    print(f"tensors: {len(ckpt.tensors)}")
    for name, arr in ckpt.tensors.items():
        shape = "x".join(str(s) for s in arr.shape) if arr.shape else "scalar"
        print(f"  {name}  {shape}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dualfusion",
        description="Desk-scale dual-conditioned diffusion for style transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True, seed=True, out=True):
        p.add_argument("--config", help="key=value config file")
        if checkpoint:
            p.add_argument("--checkpoint", help="trained checkpoint path")
        if seed:
            p.add_argument("--seed", type=int, required=True, help="sampling seed")
        if out:
            p.add_argument("--out", required=True, help="output path")
        p.add_argument("--steps", type=int, help="sampler step count")
        p.add_argument("--sampler", choices=["ddpm", "ddim"], help="sampler kind")
        p.add_argument("--scales", help="guidance scales as s_cnt,s_sty")

    p_train = sub.add_parser("train", help="train on the procedural corpus")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--out", default="run", help="output directory")
    p_train.add_argument("--seed", type=int, help="override train_seed")
    p_train.set_defaults(fn=cmd_train)

    p_sample = sub.add_parser("sample", help="stylize one content image")
    common(p_sample)
    p_sample.add_argument("--content", required=True)
    p_sample.add_argument("--style", action="append")
    p_sample.add_argument("--mask", help="P5 mask for two-style spatial blending")
    p_sample.set_defaults(fn=cmd_sample)

    p_viz = sub.add_parser("styleviz", help="sample the style-only partial model")
    common(p_viz)
    p_viz.add_argument("--style", action="append")
    p_viz.set_defaults(fn=cmd_styleviz)

    p_interp = sub.add_parser("interp", help="multi-style noise interpolation")
    common(p_interp)
    p_interp.add_argument("--content", required=True)
    p_interp.add_argument("--style", action="append")
    p_interp.add_argument("--weights", help="comma list matching the styles")
    p_interp.set_defaults(fn=cmd_interp)

    p_grid = sub.add_parser("grid", help="guidance-scale sweep montage")
    common(p_grid)
    p_grid.add_argument("--content", required=True)
    p_grid.add_argument("--style", action="append")
    p_grid.add_argument("--content-scales", dest="content_scales")
    p_grid.add_argument("--style-scales", dest="style_scales")
    p_grid.set_defaults(fn=cmd_grid)

    p_eval = sub.add_parser("eval", help="style statistics distance of two images")
    p_eval.add_argument("images", nargs=2)
    p_eval.add_argument("--config", help="key=value config file")
    p_eval.set_defaults(fn=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="list checkpoint tensors")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PpmError, CheckpointError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
