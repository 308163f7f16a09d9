"""Synthetic calibration data distilled from batch-norm statistics.

A Gaussian-initialized input batch is optimized with Adam so that, at
every batch-norm layer, the batch statistics of the tensor entering the
layer match the layer's stored running mean/std. The objective averages
squared L2 gaps over the BN layers; it can also be restricted to the mean
term only. The schedule divides the learning rate by a fixed factor at
configured iteration indices (defaults 20 and 75 for the mean+std mode,
none for mean-only).
"""

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .engine import ActivationTrace, BatchNorm2d, backprop_input, batch_stats, forward_trace
from .errors import (
    ChecksumMismatchError,
    ConfigError,
    DataError,
    DistillationDivergedError,
    DistillationError,
    FormatVersionError,
    ManifestError,
    NonFiniteError,
)
from .modelio import read_container, write_atomic, write_container

BATCH_MAGIC = b"ZSQBAT01"
BATCH_FORMAT_VERSION = 1

LOSS_MODES = ("mean", "mean_std")


@dataclass(frozen=True)
class DistillConfig:
    input_shape: tuple  # (C, H, W)
    batch_size: int = 8
    iterations: int = 500
    loss_mode: str = "mean_std"
    lr0: float = 0.1
    lr_drop_iters: tuple | None = None  # None -> (20, 75) for mean_std, () for mean
    lr_drop_factor: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    def resolved_drops(self):
        if self.lr_drop_iters is not None:
            return tuple(int(i) for i in self.lr_drop_iters)
        return (20, 75) if self.loss_mode == "mean_std" else ()


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    lr: float
    total: float
    mean_term: float
    std_term: float


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    def totals(self):
        return [r.total for r in self.records]


@dataclass
class DistilledBatch:
    data: np.ndarray  # (N, C, H, W) float32
    config: DistillConfig
    final_loss: float
    # per BN layer, in bn_indices order: (squared mean gap, squared std gap)
    residuals: list


class BnStatsLoss:
    """Average over BN layers of squared stat gaps at the layer inputs.

    mean_std mode: per layer ||batch_mean - stored_mean||^2
    + ||batch_std - stored_std||^2; mean mode drops the std term from the
    optimized value and its gradient (the std gap is still measured for
    diagnostics).
    """

    def __init__(self, model, mode="mean_std"):
        if mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
        if not model.bn_indices:
            raise DistillationError(
                "model has no batch-norm layers; statistics matching is undefined"
            )
        self.mode = mode
        self.targets = []
        for i in model.bn_indices:
            layer = model.layers[i]
            assert isinstance(layer, BatchNorm2d)
            self.targets.append(
                (i, layer.running_mean.astype(np.float64), layer.running_std.astype(np.float64))
            )

    def _tap(self, trace, index):
        tap = trace.taps.get(index)
        if tap is None:
            raise DataError(f"activation trace is missing the tap for BN layer {index}")
        return tap

    def evaluate(self, trace, want_grads=False):
        """Loss terms and (optionally) tap gradients from one stats pass.

        Returns (total, mean_term, std_term, residuals, tap_grads); terms
        are already averaged over the BN layers.
        """
        n = len(self.targets)
        mean_acc = 0.0
        std_acc = 0.0
        residuals = []
        tap_grads = {} if want_grads else None
        for i, mu, sigma in self.targets:
            tap = self._tap(trace, i)
            m, s = batch_stats(tap)
            mean_sq = float(np.sum((m - mu) ** 2))
            std_sq = float(np.sum((s - sigma) ** 2))
            residuals.append((mean_sq, std_sq))
            mean_acc += mean_sq
            std_acc += std_sq
            if want_grads:
                count = tap.shape[0] * tap.shape[2] * tap.shape[3]
                g_mean = 2.0 * (m - mu) / n
                if self.mode == "mean_std":
                    g_std = 2.0 * (s - sigma) / n
                    g = (g_std / (count * s))[None, :, None, None] * (
                        tap.astype(np.float64) - m[None, :, None, None]
                    )
                    g += (g_mean / count)[None, :, None, None]
                else:
                    g = np.broadcast_to(
                        (g_mean / count)[None, :, None, None], tap.shape
                    ).astype(np.float64)
                tap_grads[i] = g
        mean_term = mean_acc / n
        std_term = std_acc / n
        total = mean_term + std_term if self.mode == "mean_std" else mean_term
        return total, mean_term, std_term, residuals, tap_grads

    def terms(self, trace):
        """(total, mean_term, std_term, residuals)."""
        return self.evaluate(trace)[:4]

    def value(self, trace, output=None):
        return self.evaluate(trace)[0]

    def gradients(self, trace, output=None):
        return None, self.evaluate(trace, want_grads=True)[4]


def bn_statistics_loss(trace, model, mode="mean_std"):
    """Scalar statistics-matching objective for a captured trace."""
    return BnStatsLoss(model, mode).value(trace)


def _init_input(cfg):
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.batch_size,) + tuple(cfg.input_shape)
    return rng.standard_normal(shape).astype(np.float32)


def _evaluate(model, loss, x):
    _, inputs = forward_trace(model, x)
    trace = ActivationTrace({i: inputs[i] for i in model.bn_indices})
    return trace, inputs


def distill(model, cfg):
    """Optimize an input batch against the model's stored BN statistics.

    Returns the final batch and a per-iteration loss trace. Deterministic
    given (model, cfg).
    """
    if tuple(cfg.input_shape) != model.input_shape:
        raise ConfigError(
            f"config input_shape {cfg.input_shape} does not match model {model.input_shape}"
        )
    loss = BnStatsLoss(model, cfg.loss_mode)
    x = _init_input(cfg)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = cfg.lr0
    drops = set(cfg.resolved_drops())
    trace_out = LossTrace()
    for t in range(cfg.iterations):
        if t in drops:
            lr /= cfg.lr_drop_factor
        try:
            trace, inputs = _evaluate(model, loss, x)
            total, mean_term, std_term, _, tap_grads = loss.evaluate(trace, want_grads=True)
        except NonFiniteError as exc:
            raise DistillationDivergedError(
                f"distillation diverged at iteration {t}: {exc}", trace_out
            ) from exc
        if not np.isfinite(total):
            raise DistillationDivergedError(
                f"distillation loss became non-finite at iteration {t}", trace_out
            )
        trace_out.records.append(LossRecord(t, lr, total, mean_term, std_term))
        grad = backprop_input(model, inputs, None, tap_grads).astype(np.float32)
        step = t + 1
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * (grad * grad)
        m_hat = m / (1.0 - cfg.adam_beta1**step)
        v_hat = v / (1.0 - cfg.adam_beta2**step)
        x = x - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    try:
        trace, _ = _evaluate(model, loss, x)
        final_total, _, _, residuals = loss.terms(trace)
    except NonFiniteError as exc:
        raise DistillationDivergedError(f"distilled batch is non-finite: {exc}", trace_out) from exc
    batch = DistilledBatch(
        data=x, config=cfg, final_loss=final_total, residuals=residuals
    )
    return batch, trace_out


def gaussian_baseline(model, cfg):
    """The N(0,1) initialization itself, loss evaluated but never optimized."""
    loss = BnStatsLoss(model, cfg.loss_mode)
    x = _init_input(cfg)
    trace, _ = _evaluate(model, loss, x)
    total, _, _, residuals = loss.terms(trace)
    return DistilledBatch(data=x, config=cfg, final_loss=total, residuals=residuals)


def distill_many(model, cfg, count):
    """Independent batches under derived seeds (seed + batch index)."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    batches = []
    for k in range(count):
        batch, _ = distill(model, replace(cfg, seed=cfg.seed + k))
        batches.append(batch)
    return batches


def save_batch(batch, path):
    """Distilled-batch container: JSON snapshot + raw float32 blob."""
    blob = np.ascontiguousarray(batch.data, dtype="<f4").tobytes()
    cfg = asdict(batch.config)
    cfg["input_shape"] = list(batch.config.input_shape)
    if batch.config.lr_drop_iters is not None:
        cfg["lr_drop_iters"] = list(batch.config.lr_drop_iters)
    manifest = {
        "format_version": BATCH_FORMAT_VERSION,
        "shape": list(batch.data.shape),
        "config": cfg,
        "final_loss": batch.final_loss,
        "residuals": [[m, s] for m, s in batch.residuals],
        "blob_crc32": zlib.crc32(blob),
    }
    write_container(path, BATCH_MAGIC, manifest, blob)


def load_batch(path):
    manifest, blob = read_container(path, BATCH_MAGIC)
    if manifest.get("format_version") != BATCH_FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported batch format version")
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise ChecksumMismatchError(f"{path}: batch blob checksum mismatch")
    try:
        shape = tuple(int(d) for d in manifest["shape"])
        cfg_doc = dict(manifest["config"])
        cfg_doc["input_shape"] = tuple(cfg_doc["input_shape"])
        if cfg_doc.get("lr_drop_iters") is not None:
            cfg_doc["lr_drop_iters"] = tuple(cfg_doc["lr_drop_iters"])
        cfg = DistillConfig(**cfg_doc)
        data = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        residuals = [(float(m), float(s)) for m, s in manifest["residuals"]]
        final_loss = float(manifest["final_loss"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed batch file: {exc}") from exc
    return DistilledBatch(data=data, config=cfg, final_loss=final_loss, residuals=residuals)


def write_trace_csv(trace, path):
    """Per-iteration loss trace: iteration, lr, total, mean_term, std_term."""
    rows = ["iteration,lr,total,mean_term,std_term"]
    for r in trace.records:
        rows.append(f"{r.iteration},{r.lr!r},{r.total!r},{r.mean_term!r},{r.std_term!r}")
    write_atomic(path, ("\n".join(rows) + "\n").encode("ascii"))


def read_trace_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            records = [
                LossRecord(
                    int(row["iteration"]),
                    float(row["lr"]),
                    float(row["total"]),
                    float(row["mean_term"]),
                    float(row["std_term"]),
                )
                for row in reader
            ]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read loss trace {path}: {exc}") from exc
    return LossTrace(records)
