"""Experiment configuration: one TOML file drives the whole pipeline."""

import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibrate import DEFAULT_BIN_COUNT, RangeSelector
from .distill import DistillConfig
from .errors import ConfigError
from .modelio import SyntheticDataset, ToyModelSpec


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model_spec: ToyModelSpec
    model_seed: int
    dataset: SyntheticDataset
    absorb_momentum: float
    absorb_batch_size: int
    distill: DistillConfig
    distill_count: int
    selector: RangeSelector
    bins: int
    bits: int
    per_channel: bool
    eval_batches: int
    eval_batch_size: int
    eval_seed: int

    def eval_dataset(self):
        """Held-out evaluation data: same generator, separate seed."""
        return SyntheticDataset(
            kind=self.dataset.kind,
            seed=self.eval_seed,
            count=self.eval_batches * self.eval_batch_size,
            channels=self.dataset.channels,
            size=self.dataset.size,
            means=self.dataset.means,
            scales=self.dataset.scales,
        )


def _section(doc, name):
    sec = doc.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"config is missing the [{name}] section")
    return sec


def _get(sec, name, key, cast, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{name}] is missing required key {key!r}")
        return default
    try:
        return cast(sec[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}].{key}: {exc}") from exc


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    model = _section(doc, "model")
    dataset = _section(doc, "dataset")
    absorb = doc.get("absorb", {})
    distill = doc.get("distill", {})
    calib = doc.get("calibration", {})
    quant = doc.get("quantize", {})
    ev = doc.get("eval", {})

    def tup(v):
        return tuple(v)

    model_spec = ToyModelSpec(
        input_shape=tuple(_get(model, "model", "input_shape", tup, required=True)),
        channels=tuple(_get(model, "model", "channels", tup, required=True)),
        kernel_size=_get(model, "model", "kernel_size", int, 3),
        stride=_get(model, "model", "stride", int, 1),
        padding=_get(model, "model", "padding", int, None),
        pool=_get(model, "model", "pool", str, "max"),
        pool_size=_get(model, "model", "pool_size", int, 2),
        head_units=_get(model, "model", "head_units", int, None),
    )
    data = SyntheticDataset(
        kind=_get(dataset, "dataset", "kind", str, "mixed"),
        seed=_get(dataset, "dataset", "seed", int, 101),
        count=_get(dataset, "dataset", "count", int, required=True),
        channels=_get(dataset, "dataset", "channels", int, 3),
        size=_get(dataset, "dataset", "size", int, required=True),
        means=tuple(_get(dataset, "dataset", "means", tup, (1.5, -1.0, 0.5))),
        scales=tuple(_get(dataset, "dataset", "scales", tup, (2.0, 0.6, 1.2))),
    )
    if data.size != model_spec.input_shape[1] or data.size != model_spec.input_shape[2]:
        raise ConfigError(
            f"dataset size {data.size} does not match model input {model_spec.input_shape}"
        )
    loss_mode = _get(distill, "distill", "loss_mode", str, "mean_std")
    drops = distill.get("lr_drop_iters")
    distill_cfg = DistillConfig(
        input_shape=model_spec.input_shape,
        batch_size=_get(distill, "distill", "batch_size", int, 8),
        iterations=_get(distill, "distill", "iterations", int, 500),
        loss_mode=loss_mode,
        lr0=_get(distill, "distill", "lr0", float, 0.1),
        lr_drop_iters=tuple(drops) if drops is not None else None,
        lr_drop_factor=_get(distill, "distill", "lr_drop_factor", float, 5.0),
        seed=_get(distill, "distill", "seed", int, 0),
    )
    selector = RangeSelector(
        method=_get(calib, "calibration", "method", str, "percentile"),
        percentile=_get(calib, "calibration", "percentile", float, 99.99),
        bits=_get(quant, "quantize", "bits", int, 8) if quant.get("bits", 8) != 32 else 8,
    )
    return ExperimentConfig(
        name=_get(model, "model", "name", str, "toy"),
        model_spec=model_spec,
        model_seed=_get(model, "model", "seed", int, 7),
        dataset=data,
        absorb_momentum=_get(absorb, "absorb", "momentum", float, 0.1),
        absorb_batch_size=_get(absorb, "absorb", "batch_size", int, 8),
        distill=distill_cfg,
        distill_count=_get(distill, "distill", "count", int, 4),
        selector=selector,
        bins=_get(calib, "calibration", "bins", int, DEFAULT_BIN_COUNT),
        bits=_get(quant, "quantize", "bits", int, 8),
        per_channel=_get(quant, "quantize", "per_channel", bool, False),
        eval_batches=_get(ev, "eval", "batches", int, 16),
        eval_batch_size=_get(ev, "eval", "batch_size", int, 8),
        eval_seed=_get(ev, "eval", "seed", int, 999),
    )
