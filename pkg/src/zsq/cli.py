"""Command-line pipeline: build-toy, distill, calibrate, quantize, eval,
ablation, export-image.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numerical
failures (1 for anything uncategorized).
"""

import argparse
import glob
import os
import sys

import numpy as np

from . import __version__
from .calibrate import RangeSelector, calibrate_model, load_calibration, save_calibration
from .config import load_config
from .distill import DistillConfig, distill, gaussian_baseline, load_batch, save_batch, write_trace_csv
from .engine import forward
from .errors import ConfigError, DataError, ZsqError
from .modelio import (
    absorb_bn_stats,
    build_toy_model,
    export_batch_images,
    load_model,
    replicate_channels,
    save_model,
)
from .pipeline import (
    DEFAULT_ABLATION_ITERS,
    evaluate_agreement,
    gaussian_batches,
    run_ablation,
    write_ablation_report,
    write_eval_report,
)
from .quantize import QuantizedModel, load_quantized_model, quantize_model, save_quantized_model

_MODE_FLAGS = {"mean": "mean", "mean-std": "mean_std", "mean_std": "mean_std"}


def _loss_mode(flag):
    if flag not in _MODE_FLAGS:
        raise ConfigError(f"--loss must be 'mean' or 'mean-std', got {flag!r}")
    return _MODE_FLAGS[flag]


def _dataset_batches(dataset, model_channels, batch_size, limit=None):
    batches = []
    for batch in dataset.batches(batch_size):
        if batch.shape[1] == 1 and model_channels == 3:
            batch = replicate_channels(batch)
        batches.append(batch)
        if limit is not None and len(batches) >= limit:
            break
    if not batches:
        raise DataError("dataset produced no full batches")
    return batches


def _load_distilled_dir(path):
    if os.path.isfile(path):
        files = [path]
    else:
        files = sorted(glob.glob(os.path.join(path, "*.dzb")))
    if not files:
        raise DataError(f"no distilled batch files (*.dzb) found under {path}")
    return [load_batch(f).data for f in files]


def cmd_build_toy(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.model_seed
    model = build_toy_model(cfg.model_spec, seed)
    model = absorb_bn_stats(
        model, cfg.dataset, momentum=cfg.absorb_momentum, batch_size=cfg.absorb_batch_size
    )
    out = args.out or f"{cfg.name}.zsq"
    save_model(model, out)
    print(f"wrote {out}")
    print(f"  input shape : {model.input_shape}")
    print(f"  output shape: {model.output_shape}")
    print(f"  layers      : {len(model.layers)} ({len(model.bn_indices)} batch-norm)")
    print(f"  parameters  : {model.parameter_count()}")
    return 0


def cmd_distill(args):
    model = load_model(args.model)
    cfg = DistillConfig(
        input_shape=model.input_shape,
        batch_size=args.batch,
        iterations=args.iters,
        loss_mode=_loss_mode(args.loss),
        lr0=args.lr0,
        lr_drop_factor=args.lr_drop_factor,
        seed=args.seed if args.seed is not None else 0,
    )
    os.makedirs(args.out, exist_ok=True)
    from dataclasses import replace

    for k in range(args.count):
        batch, trace = distill(model, replace(cfg, seed=cfg.seed + k))
        batch_path = os.path.join(args.out, f"batch_{k:04d}.dzb")
        save_batch(batch, batch_path)
        write_trace_csv(trace, os.path.join(args.out, f"trace_{k:04d}.csv"))
        print(f"batch {k}: final loss {batch.final_loss!r} -> {batch_path}")
    total_images = args.count * args.batch
    print(f"distilled {args.count} batches ({total_images} images) into {args.out}")
    return 0


def cmd_calibrate(args):
    model = load_model(args.model)
    sel = RangeSelector(method=args.method, percentile=args.p, bits=args.bits)
    if args.source == "distilled":
        if not args.data:
            raise ConfigError("--source distilled requires --data (directory of .dzb files)")
        batches = _load_distilled_dir(args.data)
    elif args.source == "synthetic-train":
        if not args.config:
            raise ConfigError("--source synthetic-train requires --config for the dataset")
        cfg = load_config(args.config)
        batches = _dataset_batches(
            cfg.dataset, model.input_shape[0], args.batch, limit=args.batches
        )
    else:  # gaussian
        seed = args.seed if args.seed is not None else 0
        count = args.batches or 4
        batches = gaussian_batches(model.input_shape, count, args.batch, seed)
    activation_ranges, weight_ranges = calibrate_model(
        model, batches, sel, per_channel_weights=args.per_channel, bin_count=args.bins
    )
    out = args.out or "calibration.json"
    save_calibration(out, activation_ranges, weight_ranges, sel)
    print(f"calibrated {len(activation_ranges)} activation sites from {len(batches)} batches")
    for site in sorted(activation_ranges):
        r = activation_ranges[site]
        print(f"  {site:<10} [{r.lower!r}, {r.upper!r}]")
    print(f"wrote {out}")
    return 0


def cmd_quantize(args):
    model = load_model(args.model)
    if args.bits == 32:
        raise ConfigError("--bits 32 is the full-precision model itself; nothing to write")
    activation_ranges, weight_ranges = load_calibration(args.calibration)
    qm = quantize_model(model, weight_ranges, activation_ranges, args.bits)
    out = args.out or (os.path.splitext(args.model)[0] + ".q.zsq")
    save_quantized_model(qm, out)
    fp_bytes = os.path.getsize(args.model)
    q_bytes = os.path.getsize(out)
    print(f"wrote {out}")
    print(f"  full precision: {fp_bytes} B")
    print(f"  quantized     : {q_bytes} B")
    print(f"  size ratio    : {q_bytes / fp_bytes:.4f}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    qm = load_quantized_model(args.quantized)
    if args.data:
        batches = _load_distilled_dir(args.data)
    else:
        if not args.config:
            raise ConfigError("eval needs --data (batch files) or --config (held-out dataset)")
        cfg = load_config(args.config)
        eval_data = cfg.eval_dataset()
        batches = _dataset_batches(
            eval_data, model.input_shape[0], cfg.eval_batch_size, limit=cfg.eval_batches
        )
    provenance = {
        "model": os.path.basename(args.model),
        "quantized": os.path.basename(args.quantized),
        "bits": qm.bits,
        "batches": len(batches),
    }
    report = evaluate_agreement(
        model,
        qm,
        batches,
        fp_bytes=os.path.getsize(args.model),
        quant_bytes=os.path.getsize(args.quantized),
        provenance=provenance,
    )
    out = args.out or "eval-report"
    csv_path, txt_path = write_eval_report(report, out)
    agg = report.aggregates()
    print(f"evaluated {len(report.rows)} batches")
    print(f"  mse : mean={agg['mse']['mean']!r} std={agg['mse']['std']!r}")
    print(f"  sqnr: mean={agg['sqnr_db']['mean']!r} dB")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_ablation(args):
    model = load_model(args.model)
    cfg = load_config(args.config)
    iteration_list = tuple(int(v) for v in args.iters.split(",")) if args.iters else DEFAULT_ABLATION_ITERS
    modes = tuple(_loss_mode(m) for m in args.modes.split(",")) if args.modes else ("mean", "mean_std")
    eval_data = cfg.eval_dataset()
    eval_batches = _dataset_batches(
        eval_data, model.input_shape[0], cfg.eval_batch_size, limit=cfg.eval_batches
    )
    base = DistillConfig(
        input_shape=model.input_shape,
        batch_size=cfg.distill.batch_size,
        loss_mode="mean_std",
        lr0=cfg.distill.lr0,
        seed=args.seed if args.seed is not None else cfg.distill.seed,
    )
    report = run_ablation(
        model,
        eval_batches,
        base,
        cfg.selector,
        bits=cfg.bits,
        iteration_list=iteration_list,
        modes=modes,
        calib_batches=args.count,
    )
    out = args.out or "ablation-report"
    csv_path, txt_path = write_ablation_report(report, out)
    print(f"ablation grid: {report.row_count()} rows (incl. gaussian baseline)")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_export_image(args):
    batch = load_batch(args.batch)
    written = export_batch_images(batch.data, args.out or "images")
    print(f"wrote {len(written)} PGM files to {args.out or 'images'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zsq",
        description="zero-shot quantization pipeline for toy CNNs",
    )
    parser.add_argument("--version", action="version", version=f"zsq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--config", help="experiment config (TOML)")

    p = sub.add_parser("build-toy", help="build a toy model and absorb BN statistics")
    common(p)
    p.set_defaults(func=cmd_build_toy, needs_config=True)

    p = sub.add_parser("distill", help="distill synthetic batches from BN statistics")
    common(p)
    p.add_argument("--model", required=True, help="full-precision model (.zsq)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--loss", default="mean-std", help="mean | mean-std")
    p.add_argument("--count", type=int, default=1, help="number of batches to distill")
    p.add_argument("--lr0", type=float, default=0.1)
    p.add_argument("--lr-drop-factor", type=float, default=5.0)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("calibrate", help="select clipping ranges for every activation site")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True, choices=["distilled", "synthetic-train", "gaussian"])
    p.add_argument("--data", help="distilled-batch file or directory (for --source distilled)")
    p.add_argument("--method", default="percentile", choices=["minmax", "percentile", "entropy"])
    p.add_argument("--p", type=float, default=99.99, help="percentile threshold")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--bins", type=int, default=2048)
    p.add_argument("--batch", type=int, default=8, help="batch size for generated sources")
    p.add_argument("--batches", type=int, default=None, help="batch count for generated sources")
    p.add_argument("--per-channel", action="store_true", help="per-channel weight ranges")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize a model with a calibration file")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="compare full-precision and quantized outputs")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", required=True)
    p.add_argument("--data", help="evaluation batches (.dzb file or directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="loss-mode x iteration-count grid with baseline")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--iters", help="comma-separated iteration counts")
    p.add_argument("--modes", help="comma-separated loss modes")
    p.add_argument("--count", type=int, default=2, help="distilled batches per grid cell")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("export-image", help="dump a distilled batch as PGM images")
    common(p)
    p.add_argument("--batch", required=True, help="distilled batch file (.dzb)")
    p.set_defaults(func=cmd_export_image)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_config", False) and not args.config:
        parser.error(f"{args.command} requires --config")
    try:
        return args.func(args)
    except ZsqError as exc:
        print(f"zsq {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
