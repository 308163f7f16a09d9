#!/usr/bin/env python3
"""Compare quantization agreement across calibration data sources.

Reproduces the two headline comparisons at desk scale:
  1. distilled data vs raw N(0,1) noise (zero-shot vs random baseline);
  2. distilled data vs training batches, one calibration batch at a time
     (zero-shot vs post-training quantization, spread included).
Prints a summary table; writes per-batch CSVs next to --out.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from zsq.calibrate import calibrate_model  # noqa: E402
from zsq.config import load_config  # noqa: E402
from zsq.distill import distill  # noqa: E402
from zsq.modelio import absorb_bn_stats, build_toy_model, write_atomic  # noqa: E402
from zsq.pipeline import evaluate_agreement, gaussian_batches  # noqa: E402
from zsq.quantize import quantize_model  # noqa: E402


def agreement(model, calib_batches, eval_batches, sel, bits):
    act, wts = calibrate_model(model, calib_batches, sel)
    qm = quantize_model(model, wts, act, bits)
    rep = evaluate_agreement(model, qm, eval_batches)
    agg = rep.aggregates()
    return agg["mse"]["mean"], agg["sqnr_db"]["mean"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/reference.toml")
    parser.add_argument("--out", default="runs/source-comparison")
    parser.add_argument("--batches", type=int, default=32, help="calibration batches per side")
    parser.add_argument("--iters", type=int, default=300, help="distillation iterations")
    args = parser.parse_args()

    cfg = load_config(args.config)
    model = build_toy_model(cfg.model_spec, cfg.model_seed)
    model = absorb_bn_stats(model, cfg.dataset, cfg.absorb_momentum, cfg.absorb_batch_size)
    eval_data = cfg.eval_dataset()
    eval_batches = [
        eval_data.batch(i * cfg.eval_batch_size, cfg.eval_batch_size)
        for i in range(cfg.eval_batches)
    ]
    sel = cfg.selector
    base = replace(cfg.distill, iterations=args.iters, lr_drop_iters=None)

    # pooled comparison: distilled vs noise
    distilled = [
        distill(model, replace(base, seed=base.seed + k))[0].data for k in range(4)
    ]
    noise = gaussian_batches(model.input_shape, 4, base.batch_size, seed=777)
    z_mse, z_sqnr = agreement(model, distilled, eval_batches, sel, cfg.bits)
    g_mse, g_sqnr = agreement(model, noise, eval_batches, sel, cfg.bits)
    print(f"distilled calibration : mse={z_mse:.6g}  sqnr={z_sqnr:.2f} dB")
    print(f"gaussian baseline     : mse={g_mse:.6g}  sqnr={g_sqnr:.2f} dB")
    print(f"mse ratio distilled/noise = {z_mse / g_mse:.3f}")

    # per-batch spread: zero-shot vs training-data calibration
    rows = ["source,batch,sqnr_db"]
    ptq, zsq = [], []
    n = args.batches
    for i in range(n):
        bs = cfg.distill.batch_size
        batch = cfg.dataset.batch((i * bs) % (cfg.dataset.count - bs + 1), bs)
        _, sq = agreement(model, [batch], eval_batches, sel, cfg.bits)
        ptq.append(sq)
        rows.append(f"training,{i},{sq!r}")
    for i in range(n):
        b, _ = distill(model, replace(base, seed=1000 + i))
        _, sq = agreement(model, [b.data], eval_batches, sel, cfg.bits)
        zsq.append(sq)
        rows.append(f"distilled,{i},{sq!r}")
    os.makedirs(args.out, exist_ok=True)
    write_atomic(os.path.join(args.out, "per_batch.csv"), ("\n".join(rows) + "\n").encode())
    print(f"training-data calibration: sqnr mean={np.mean(ptq):.2f} std={np.std(ptq):.3f}")
    print(f"distilled calibration    : sqnr mean={np.mean(zsq):.2f} std={np.std(zsq):.3f}")
    print(f"wrote {os.path.join(args.out, 'per_batch.csv')}")


if __name__ == "__main__":
    main()
