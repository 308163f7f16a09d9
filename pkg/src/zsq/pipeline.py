"""End-to-end harness: agreement evaluation and the ablation grid.

Detection metrics are out of reach at desk scale, so full-precision vs
quantized agreement is measured as per-batch output MSE and SQNR
(10*log10(signal power / error power)); comparisons from the source
experiments are reproduced directionally on these metrics.
"""

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .calibrate import calibrate_model, select_range
from .distill import DistillConfig, distill, gaussian_baseline
from .engine import forward
from .errors import DataError
from .modelio import write_atomic
from .quantize import forward_quantized, quantize_model

EVAL_CSV_HEADER = "batch,mse,sqnr_db"


def sqnr_db(signal_power, error_power):
    if error_power == 0.0:
        return math.inf
    if signal_power == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal_power / error_power)


def check_same_structure(model_a, model_b):
    """Both graphs must match layer-by-layer up to weight values."""
    if model_a.input_shape != model_b.input_shape:
        raise DataError(
            f"input shapes differ: {model_a.input_shape} vs {model_b.input_shape}"
        )
    if len(model_a.layers) != len(model_b.layers):
        raise DataError(
            f"layer counts differ: {len(model_a.layers)} vs {len(model_b.layers)}"
        )
    for i, (la, lb) in enumerate(zip(model_a.layers, model_b.layers)):
        if la.KIND != lb.KIND:
            raise DataError(f"layer {i}: kind {la.KIND} vs {lb.KIND}")
        if la.hyperparams() != lb.hyperparams():
            raise DataError(f"layer {i} ({la.KIND}): hyperparameters differ")
        pa, pb = la.params(), lb.params()
        shapes_a = {k: v.shape for k, v in pa.items()}
        shapes_b = {k: v.shape for k, v in pb.items()}
        if shapes_a != shapes_b:
            raise DataError(f"layer {i} ({la.KIND}): parameter shapes differ")


@dataclass
class EvalReport:
    """Per-batch FP-vs-quantized agreement plus aggregates and provenance."""

    rows: list  # (batch index, mse, sqnr_db)
    fp_bytes: int | None = None
    quant_bytes: int | None = None
    provenance: dict = field(default_factory=dict)

    def mse_values(self):
        return [r[1] for r in self.rows]

    def sqnr_values(self):
        return [r[2] for r in self.rows]

    def aggregates(self):
        out = {}
        for name, values in (("mse", self.mse_values()), ("sqnr_db", self.sqnr_values())):
            finite = [v for v in values if math.isfinite(v)]
            arr = np.asarray(finite if finite else values, dtype=np.float64)
            out[name] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "min": float(min(values)),
                "max": float(max(values)),
            }
        return out


def evaluate_agreement(model, qmodel, batches, fp_bytes=None, quant_bytes=None, provenance=None):
    """Forward every batch through both models and collect agreement rows."""
    check_same_structure(model, qmodel.graph)
    rows = []
    for idx, batch in enumerate(batches):
        batch = np.asarray(batch, dtype=np.float32)
        fp_out, _ = forward(model, batch)
        q_out = forward_quantized(qmodel, batch)
        err = q_out.astype(np.float64) - fp_out.astype(np.float64)
        mse = float(np.mean(err * err))
        signal = float(np.mean(fp_out.astype(np.float64) ** 2))
        rows.append((idx, mse, sqnr_db(signal, mse)))
    if not rows:
        raise DataError("evaluation needs at least one batch")
    return EvalReport(
        rows=rows,
        fp_bytes=fp_bytes,
        quant_bytes=quant_bytes,
        provenance=dict(provenance or {}),
    )


def write_eval_report(report, out_dir, stem="eval"):
    """CSV of per-batch rows plus a human-readable summary."""
    os.makedirs(out_dir, exist_ok=True)
    csv_lines = [EVAL_CSV_HEADER]
    for idx, mse, sqnr in report.rows:
        csv_lines.append(f"{idx},{mse!r},{sqnr!r}")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_atomic(csv_path, ("\n".join(csv_lines) + "\n").encode("ascii"))

    agg = report.aggregates()
    lines = ["full-precision vs quantized agreement", "=" * 38]
    lines.append(f"batches evaluated: {len(report.rows)}")
    for name in ("mse", "sqnr_db"):
        a = agg[name]
        lines.append(
            f"{name}: mean={a['mean']!r} std={a['std']!r} min={a['min']!r} max={a['max']!r}"
        )
    if report.fp_bytes is not None and report.quant_bytes is not None:
        ratio = report.quant_bytes / report.fp_bytes
        lines.append(
            f"model size: {report.fp_bytes} B full precision -> {report.quant_bytes} B quantized"
            f" (ratio {ratio!r})"
        )
    if report.provenance:
        lines.append("provenance:")
        for key in sorted(report.provenance):
            lines.append(f"  {key} = {report.provenance[key]!r}")
    txt_path = os.path.join(out_dir, f"{stem}.txt")
    write_atomic(txt_path, ("\n".join(lines) + "\n").encode("ascii"))
    return csv_path, txt_path


def gaussian_batches(input_shape, count, batch_size, seed):
    """Unoptimized N(0,1) batches, the random-calibration baseline."""
    rng = np.random.default_rng(seed)
    return [
        rng.standard_normal((batch_size,) + tuple(input_shape)).astype(np.float32)
        for _ in range(count)
    ]


DEFAULT_ABLATION_ITERS = (10, 50, 100, 250, 500, 1000)


@dataclass
class AblationReport:
    """One row per (loss mode, iteration count) plus the Gaussian baseline."""

    rows: list  # dicts: mode, iterations, distill_loss, mse_mean, mse_std, sqnr_mean

    def row_count(self):
        return len(self.rows)


def _quantize_with_batches(model, batches, sel, bits):
    activation_ranges, weight_ranges = calibrate_model(model, batches, sel)
    return quantize_model(model, weight_ranges, activation_ranges, bits)


def run_ablation(
    model,
    eval_batches,
    base_cfg,
    sel,
    bits=8,
    iteration_list=DEFAULT_ABLATION_ITERS,
    modes=("mean", "mean_std"),
    calib_batches=2,
):
    """Distill/calibrate/quantize/evaluate over the full (mode, iterations) grid.

    The Gaussian baseline row calibrates with the unoptimized N(0,1)
    batches. No ordering between the two loss modes is asserted anywhere;
    the grid only reports what it measures.
    """
    rows = []
    for mode in modes:
        for iters in iteration_list:
            cfg = replace(base_cfg, loss_mode=mode, iterations=iters, lr_drop_iters=None)
            batches = []
            losses = []
            for k in range(calib_batches):
                batch, _ = distill(model, replace(cfg, seed=cfg.seed + k))
                batches.append(batch.data)
                losses.append(batch.final_loss)
            qm = _quantize_with_batches(model, batches, sel, bits)
            report = evaluate_agreement(model, qm, eval_batches)
            agg = report.aggregates()
            rows.append(
                {
                    "mode": mode,
                    "iterations": iters,
                    "distill_loss": float(np.mean(losses)),
                    "mse_mean": agg["mse"]["mean"],
                    "mse_std": agg["mse"]["std"],
                    "sqnr_mean": agg["sqnr_db"]["mean"],
                }
            )
    baseline_losses = []
    baseline_data = []
    for k in range(calib_batches):
        cfg = replace(base_cfg, seed=base_cfg.seed + k)
        batch = gaussian_baseline(model, cfg)
        baseline_data.append(batch.data)
        baseline_losses.append(batch.final_loss)
    qm = _quantize_with_batches(model, baseline_data, sel, bits)
    report = evaluate_agreement(model, qm, eval_batches)
    agg = report.aggregates()
    rows.append(
        {
            "mode": "gaussian-baseline",
            "iterations": 0,
            "distill_loss": float(np.mean(baseline_losses)),
            "mse_mean": agg["mse"]["mean"],
            "mse_std": agg["mse"]["std"],
            "sqnr_mean": agg["sqnr_db"]["mean"],
        }
    )
    return AblationReport(rows=rows)


def write_ablation_report(report, out_dir, stem="ablation"):
    os.makedirs(out_dir, exist_ok=True)
    header = "mode,iterations,distill_loss,mse_mean,mse_std,sqnr_mean"
    lines = [header]
    for r in report.rows:
        lines.append(
            f"{r['mode']},{r['iterations']},{r['distill_loss']!r},"
            f"{r['mse_mean']!r},{r['mse_std']!r},{r['sqnr_mean']!r}"
        )
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_atomic(csv_path, ("\n".join(lines) + "\n").encode("ascii"))

    txt = ["loss-mode / iteration ablation", "=" * 30]
    for r in report.rows:
        txt.append(
            f"mode={r['mode']:<18} iters={r['iterations']:<5} "
            f"distill_loss={r['distill_loss']:.6g} mse={r['mse_mean']:.6g} "
            f"sqnr_db={r['sqnr_mean']:.4g}"
        )
    txt_path = os.path.join(out_dir, f"{stem}.txt")
    write_atomic(txt_path, ("\n".join(txt) + "\n").encode("ascii"))
    return csv_path, txt_path
