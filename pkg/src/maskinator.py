"""Maskinator: command line tools for learned inverse lithography.

Subcommands:
    gen-data   generate synthetic designs and label them with ILT masks
    ilt        optimize masks for design files
    train      train the CFNO on a dataset
    lgst       litho-guided self training
    eval       per-design MSE/EPE/PVB/score report with an average row
    tile-opt   optimize a large clip tile by tile and merge
    render     write mask, aerial, resist or PVB images as PGM
"""

from __future__ import annotations

import argparse
import os
import pathlib
import sys
import time
import typing as t

import numpy as np
import pandas as pd

import tensor_ad as ad
from cfno import CfnoNet
from config import ConfigError, RunConfig
from ilt import MaskGrid, binarize, ilt_optimize, write_loss_trace
from layout import VIA_LIKE, LayoutRaster, generate, load_rectlist, rasterize, save_rectlist
from lgst import TrainingSet, build_training_set, lgst_run, train_epochs, write_loss_curve
from litho import aerial_image, corner_images, resist, set_fft_workers
from metrics import (
    EvaluationRow,
    evaluate_mask,
    evaluation_table,
    throughput_um2_per_s,
    write_evaluation_csv,
)
from tiling import optimize_tiled
from utils import (
    APP_NAME,
    MaskinatorError,
    __version__,
    configure_logging,
    get_logger,
    load_pgm,
    save_pgm,
)

__all__ = ["main", "build_parser"]

logger = get_logger("cli")

MASK_TENSOR = "mask"
PGM_SUFFIXES = (".pgm", ".pnm")


def load_design(path: t.Union[str, os.PathLike], nm_per_px: float) -> LayoutRaster:
    """Design from a rect-list text file or a PGM raster"""
    path = pathlib.Path(path)
    if path.suffix.lower() in PGM_SUFFIXES:
        return LayoutRaster.from_array(load_pgm(path), nm_per_px)
    return rasterize(load_rectlist(path), nm_per_px)


def load_mask(path: t.Union[str, os.PathLike], nm_per_px: float) -> MaskGrid:
    """Mask from a PGM or from a checkpoint holding a 'mask' tensor"""
    path = pathlib.Path(path)
    if path.suffix.lower() in PGM_SUFFIXES:
        return MaskGrid(load_pgm(path), nm_per_px)
    tensors = ad.read_checkpoint(path)
    if MASK_TENSOR not in tensors:
        raise MaskinatorError(f"{path} holds no '{MASK_TENSOR}' tensor")
    return MaskGrid(np.clip(tensors[MASK_TENSOR].astype(np.float64), 0.0, 1.0), nm_per_px)


def _out_dir(args: argparse.Namespace, cfg: RunConfig, default: str) -> pathlib.Path:
    out = pathlib.Path(args.out) if args.out else pathlib.Path(cfg.output_dir) / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg, "dataset")
    (out / "rects").mkdir(exist_ok=True)
    designs = []
    for i, spec in enumerate(cfg.generator_specs()):
        name = f"{'via' if spec.kind == VIA_LIKE else 'metal'}-{i:03d}"
        rects = generate(spec)
        save_rectlist(out / "rects" / f"{name}.txt", rects)
        designs.append((name, rasterize(rects, cfg.nm_per_px)))
    evaluator = cfg.evaluator()
    ds = build_training_set(designs, evaluator, cfg.ilt_config(), args.threads)
    ds.save(out)
    logger.info(f"wrote {len(ds)} samples to {out} (mean mse {ds.mean_mse:.4g})")
    return 0


def cmd_ilt(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg, "ilt")
    evaluator = cfg.evaluator()
    ilt_cfg = cfg.ilt_config()
    for design_path in args.designs:
        design = load_design(design_path, cfg.nm_per_px)
        stem = pathlib.Path(design_path).stem
        mask, trace = ilt_optimize(
            design, evaluator.nominal, evaluator.resist_model, ilt_cfg, evaluator.defocus
        )
        binarize(mask, ilt_cfg.binarize_threshold).save_pgm(out / f"{stem}-mask.pgm")
        ad.write_checkpoint(out / f"{stem}-mask.ckpt", {MASK_TENSOR: mask.values})
        write_loss_trace(out / f"{stem}-loss.csv", trace)
        logger.info(
            f"{stem}: loss {trace[0]:.4g} -> {trace[-1]:.4g}, mse {evaluator.mse(mask, design):.4g}"
        )
    return 0


def _load_net(path: t.Optional[str], cfg: RunConfig) -> CfnoNet:
    if path:
        return CfnoNet.load(path)
    return CfnoNet(cfg.cfno_architecture(), seed=cfg.seed)


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg, "train")
    evaluator = cfg.evaluator()
    ds = TrainingSet.load(args.dataset, evaluator)
    net, curve = train_epochs(
        _load_net(args.init, cfg), ds, cfg.train_config(), evaluator, args.threads
    )
    net.save(out / "cfno.ckpt")
    write_loss_curve(out / "loss.csv", curve)
    logger.info(f"trained {net.parameter_count()} parameters; final loss {curve[-1].train_loss:.4g}")
    return 0


def cmd_lgst(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.rounds is not None:
        cfg = cfg.with_overrides([f"lgst_rounds={args.rounds}"])
    out = _out_dir(args, cfg, "lgst")
    evaluator = cfg.evaluator()
    ds = TrainingSet.load(args.dataset, evaluator)
    result = lgst_run(
        _load_net(args.init, cfg),
        ds,
        evaluator,
        cfg.train_config(),
        cfg.lgst_config(),
        out,
        args.threads,
    )
    for report in result.reports:
        logger.info(
            f"round {report.round}: replaced {100 * report.replaced_fraction:.1f}% "
            f"(accumulated {100 * report.accumulated_fraction:.1f}%)"
        )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    evaluator = cfg.evaluator()
    ds = TrainingSet.load(args.dataset, evaluator)
    net = CfnoNet.load(args.model) if args.model else None
    rows: t.List[EvaluationRow] = []
    total_area, total_time = 0.0, 0.0
    for sample in ds.samples:
        start = time.perf_counter()
        mask = net.predict(sample.design) if net is not None else sample.mask
        runtime = time.perf_counter() - start if net is not None else 0.0
        total_area += sample.design.area_nm2
        total_time += runtime
        if args.deterministic:
            runtime = 0.0
        rows.append(evaluate_mask(sample.name, mask, sample.design, evaluator, runtime))

    baseline = pd.read_csv(args.baseline) if args.baseline else None
    table = evaluation_table(rows, baseline)
    out = pathlib.Path(args.out) if args.out else pathlib.Path(cfg.output_dir) / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_evaluation_csv(table, out)
    throughput = 0.0 if args.deterministic else throughput_um2_per_s(total_area, total_time)
    print(f"throughput_um2_per_s,{throughput!r}")
    logger.info(f"wrote {out}")
    return 0


def cmd_tile_opt(args: argparse.Namespace, cfg: RunConfig) -> int:
    spec = cfg.tile_spec()
    clip = load_design(args.clip, cfg.nm_per_px)
    evaluator = cfg.evaluator()
    if args.model:
        net = CfnoNet.load(args.model)
        optimizer = net.predict
    else:
        ilt_cfg = cfg.ilt_config()

        def optimizer(tile: LayoutRaster) -> MaskGrid:
            mask, _ = ilt_optimize(
                tile, evaluator.nominal, evaluator.resist_model, ilt_cfg, evaluator.defocus
            )
            return mask

    start = time.perf_counter()
    mask = optimize_tiled(clip, spec, optimizer, args.threads)
    runtime = 0.0 if args.deterministic else time.perf_counter() - start
    out = _out_dir(args, cfg, "tile-opt")
    stem = pathlib.Path(args.clip).stem
    binarize(mask, cfg.binarize_threshold).save_pgm(out / f"{stem}-mask.pgm")
    table = evaluation_table([evaluate_mask(stem, mask, clip, evaluator, runtime)])
    write_evaluation_csv(table, out / f"{stem}-eval.csv")
    logger.info(f"{stem}: merged mask written to {out}")
    return 0


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> int:
    evaluator = cfg.evaluator()
    if args.kind == "design":
        save_pgm(args.output, load_design(args.input, cfg.nm_per_px).pixels)
        return 0
    mask = load_mask(args.input, cfg.nm_per_px)
    if args.kind == "mask":
        values = mask.values
    elif args.kind == "aerial":
        intensity = aerial_image(binarize(mask, cfg.binarize_threshold), evaluator.nominal).intensity
        values = intensity / intensity.max() if intensity.max() > 0 else intensity
    elif args.kind == "resist":
        binary = binarize(mask, cfg.binarize_threshold)
        values = resist(aerial_image(binary, evaluator.nominal), evaluator.resist_model).pixels
    else:
        corners = corner_images(
            binarize(mask, cfg.binarize_threshold),
            evaluator.nominal,
            evaluator.defocus,
            evaluator.doses,
            evaluator.resist_model,
        )
        stack = np.stack([c.pixels for c in corners]).astype(bool)
        values = (stack.any(axis=0) & ~stack.all(axis=0)).astype(np.uint8)
    save_pgm(args.output, values)
    return 0


COMMANDS: t.Dict[str, t.Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "ilt": cmd_ilt,
    "train": cmd_train,
    "lgst": cmd_lgst,
    "eval": cmd_eval,
    "tile-opt": cmd_tile_opt,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=APP_NAME.lower(), description="Learned inverse lithography toolkit"
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {__version__}")
    parser.add_argument("--config", help="key = value or .plist config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value"
    )
    parser.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    parser.add_argument(
        "--deterministic", action="store_true", help="zero runtime fields so outputs are reproducible"
    )
    parser.add_argument("--debug", action="store_true", help="debug logging, also to the log file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and ILT-label a synthetic dataset")
    p.add_argument("--out", help="dataset directory")

    p = sub.add_parser("ilt", help="optimize masks for design files")
    p.add_argument("designs", nargs="+", help="rect-list or PGM design files")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train the CFNO on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("lgst", help="litho-guided self training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--rounds", type=int, help="number of LGST rounds")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="evaluate dataset masks or model predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="evaluate this checkpoint's masks instead of the stored ones")
    p.add_argument("--baseline", help="earlier eval CSV; adds a ratio row")
    p.add_argument("--out", help="CSV file to write")

    p = sub.add_parser("tile-opt", help="optimize a large clip tile by tile")
    p.add_argument("clip", help="rect-list or PGM clip")
    p.add_argument("--model", help="use this checkpoint per tile instead of ILT")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("render", help="write an image as PGM")
    p.add_argument("kind", choices=["design", "mask", "aerial", "resist", "pvb"])
    p.add_argument("input", help="design file, or mask PGM / checkpoint")
    p.add_argument("output", help="PGM file to write")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def _report_error(e: BaseException):
    detail = str(e).replace("\n", " ")
    print(f"error: {type(e).__name__}: {detail}", file=sys.stderr)


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _report_error(ConfigError(f"--threads must be >= 1, got {args.threads}"))
        return 2
    try:
        cfg = load_run_config(args)
        configure_logging(args.debug or cfg.debug, cfg.output_dir)
        set_fft_workers(args.threads)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        _report_error(e)
        return 2
    except (MaskinatorError, OSError) as e:
        _report_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
