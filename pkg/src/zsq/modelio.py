"""Model interchange format, toy-model construction, and synthetic data.

A `.zsq` file is a small binary container: magic, a length-prefixed UTF-8
JSON manifest, then a weight blob of little-endian float32 values in
manifest order. The manifest records byte offsets/lengths per parameter
tensor plus a CRC-32 of the blob, so load(save(m)) is bit-exact.
"""

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    LAYER_KINDS,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ReLU,
    batch_stats,
)
from .errors import (
    BlobBoundsError,
    ChecksumMismatchError,
    ConfigError,
    DataError,
    FormatVersionError,
    ManifestError,
    ShapeMismatchError,
)

MODEL_MAGIC = b"ZSQMDL01"
MODEL_FORMAT_VERSION = 1


def write_atomic(path, payload):
    """Whole-file atomic write: temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, magic, manifest, blob):
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = magic + len(header).to_bytes(4, "little") + header + blob
    write_atomic(path, payload)


def read_container(path, magic):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < len(magic) + 4 or raw[: len(magic)] != magic:
        raise ManifestError(f"{path}: bad magic, not a {magic.decode()} file")
    hlen = int.from_bytes(raw[len(magic) : len(magic) + 4], "little")
    start = len(magic) + 4
    if start + hlen > len(raw):
        raise ManifestError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    return manifest, raw[start + hlen :]


def _blob_entry(entries, blob_parts, offset, name, array):
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    entries[name] = {
        "shape": [int(d) for d in array.shape],
        "offset": offset,
        "length": len(data),
    }
    blob_parts.append(data)
    return offset + len(data)


def _read_entry(blob, entry, name):
    try:
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
        length = int(entry["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"parameter {name}: malformed blob entry") from exc
    want = 4 * int(np.prod(shape)) if shape else 4
    if length != want:
        raise ManifestError(
            f"parameter {name}: length {length} != 4 x element count {want // 4}"
        )
    if offset < 0 or offset + length > len(blob):
        raise BlobBoundsError(
            f"parameter {name}: [{offset}, {offset + length}) outside blob of {len(blob)} bytes"
        )
    return np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset).reshape(shape)


def save_model(model, path):
    """Serialize a graph to a `.zsq` container; forward behavior round-trips bit-exactly."""
    layers = []
    blob_parts = []
    offset = 0
    for layer in model.layers:
        desc = {"kind": layer.KIND}
        desc.update(layer.hyperparams())
        entries = {}
        for name, arr in layer.params().items():
            offset = _blob_entry(entries, blob_parts, offset, name, arr)
        desc["params"] = entries
        layers.append(desc)
    blob = b"".join(blob_parts)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "blob_size": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    write_container(path, MODEL_MAGIC, manifest, blob)


def _build_layer(desc, blob, index):
    kind = desc.get("kind")
    if kind not in LAYER_KINDS:
        raise ManifestError(f"layer {index}: unknown kind {kind!r}")
    params = desc.get("params", {})

    def p(name):
        if name not in params:
            raise ManifestError(f"layer {index} ({kind}): missing parameter {name!r}")
        return _read_entry(blob, params[name], f"layer{index}.{name}")

    try:
        if kind == "Conv2d":
            return Conv2d(p("weight"), p("bias"), stride=desc["stride"], padding=desc["padding"])
        if kind == "BatchNorm2d":
            return BatchNorm2d(
                p("gamma"), p("beta"), p("running_mean"), p("running_std"),
                epsilon=desc["epsilon"],
            )
        if kind == "ReLU":
            return ReLU()
        if kind == "MaxPool2d":
            return MaxPool2d(kernel=desc["kernel"], stride=desc["stride"])
        if kind == "AvgPool2d":
            return AvgPool2d(kernel=desc["kernel"], stride=desc["stride"])
        if kind == "Flatten":
            return Flatten()
        if kind == "Linear":
            return Linear(p("weight"), p("bias"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"layer {index} ({kind}): {exc}") from exc
    raise ManifestError(f"layer {index}: unhandled kind {kind!r}")


def load_model(path):
    manifest, blob = read_container(path, MODEL_MAGIC)
    version = manifest.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version}, supported {MODEL_FORMAT_VERSION}"
        )
    declared = manifest.get("blob_size")
    if declared is not None and declared != len(blob):
        raise BlobBoundsError(f"{path}: blob is {len(blob)} bytes, manifest says {declared}")
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise ChecksumMismatchError(f"{path}: weight blob checksum mismatch")
    try:
        input_shape = tuple(int(d) for d in manifest["input_shape"])
        layer_descs = manifest["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    layers = [_build_layer(d, blob, i) for i, d in enumerate(layer_descs)]
    return ModelGraph(layers, input_shape)


@dataclass(frozen=True)
class ToyModelSpec:
    """Architecture of a toy CNN: (conv-BN-ReLU [pool])* blocks + optional linear head."""

    input_shape: tuple  # (C, H, W)
    channels: tuple  # output channels per block
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None  # None -> same padding (kernel_size // 2)
    pool: str | None = "max"  # "max" | "avg" | None, applied after each block
    pool_size: int = 2
    head_units: int | None = None

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("toy model needs at least one conv-BN-ReLU block")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C,H,W), got {self.input_shape}")
        if self.pool not in (None, "max", "avg"):
            raise ConfigError(f"pool must be 'max', 'avg' or None, got {self.pool!r}")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel widths must be positive, got {self.channels}")


def build_toy_model(spec, seed):
    """Deterministically initialized toy CNN.

    Conv/linear weights use scaled uniform init (bound 1/sqrt(fan_in));
    batch-norm layers start at identity statistics (mean 0, std 1).
    """
    rng = np.random.default_rng(seed)
    pad = spec.padding if spec.padding is not None else spec.kernel_size // 2
    layers = []
    cin = spec.input_shape[0]
    for cout in spec.channels:
        fan_in = cin * spec.kernel_size * spec.kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, (cout, cin, spec.kernel_size, spec.kernel_size))
        bias = rng.uniform(-bound, bound, cout)
        layers.append(Conv2d(weight, bias, stride=spec.stride, padding=pad))
        layers.append(BatchNorm2d(np.ones(cout), np.zeros(cout), np.zeros(cout), np.ones(cout)))
        layers.append(ReLU())
        if spec.pool == "max":
            layers.append(MaxPool2d(kernel=spec.pool_size))
        elif spec.pool == "avg":
            layers.append(AvgPool2d(kernel=spec.pool_size))
        cin = cout
    if spec.head_units is not None:
        layers.append(Flatten())
        trunk = ModelGraph(layers, spec.input_shape)
        fan_in = trunk.output_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, (spec.head_units, fan_in))
        bias = rng.uniform(-bound, bound, spec.head_units)
        layers.append(Linear(weight, bias))
    try:
        return ModelGraph(layers, spec.input_shape)
    except ShapeMismatchError as exc:
        raise ConfigError(f"inconsistent toy model spec: {exc}") from exc


DATASET_KINDS = ("gaussian", "gradients", "blobs", "mixed")


@dataclass(frozen=True)
class SyntheticDataset:
    """Deterministic stand-in for a training set.

    Channels get distinct means/scales so batch-norm statistics are
    nontrivial per channel. Regenerating with the same seed is bit-exact.
    """

    kind: str
    seed: int
    count: int
    channels: int
    size: int
    means: tuple = (1.5, -1.0, 0.5)
    scales: tuple = (2.0, 0.6, 1.2)

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}, expected one of {DATASET_KINDS}")
        if self.channels not in (1, 3):
            raise ConfigError(f"dataset channels must be 1 or 3, got {self.channels}")
        if len(self.means) < self.channels or len(self.scales) < self.channels:
            raise ConfigError("means/scales must provide one value per channel")
        if self.count < 0 or self.size < 1:
            raise ConfigError("dataset count must be >= 0 and size >= 1")

    def image(self, index):
        """(C, H, W) float32 image; a pure function of (config, index)."""
        rng = np.random.default_rng([self.seed, index])
        kind = self.kind
        if kind == "mixed":
            kind = ("gaussian", "gradients", "blobs")[int(rng.integers(0, 3))]
        h = w = self.size
        c = self.channels
        means = np.asarray(self.means[:c], dtype=np.float64)[:, None, None]
        scales = np.asarray(self.scales[:c], dtype=np.float64)[:, None, None]
        if kind == "gaussian":
            img = means + scales * rng.standard_normal((c, h, w))
        else:
            if kind == "gradients":
                theta = rng.uniform(0.0, 2.0 * np.pi)
                ys, xs = np.mgrid[0:h, 0:w]
                field = np.cos(theta) * (2.0 * xs / max(w - 1, 1) - 1.0)
                field += np.sin(theta) * (2.0 * ys / max(h - 1, 1) - 1.0)
            else:  # blobs
                ys, xs = np.mgrid[0:h, 0:w]
                field = np.zeros((h, w))
                for _ in range(int(rng.integers(2, 6))):
                    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                    sigma = rng.uniform(0.08, 0.25) * self.size
                    amp = rng.uniform(0.5, 2.0) * (1 if rng.uniform() < 0.7 else -1)
                    field += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
            spread = field.std()
            if spread > 0:
                field = (field - field.mean()) / spread
            contrast = rng.uniform(0.6, 1.4, (c, 1, 1))
            noise = 0.15 * rng.standard_normal((c, h, w))
            img = means + scales * (contrast * field[None] + noise)
        return img.astype(np.float32)

    def batch(self, start, size):
        """(size, C, H, W) stack of consecutive images starting at `start`."""
        if start < 0 or start + size > self.count:
            raise DataError(
                f"batch [{start}, {start + size}) outside dataset of {self.count} images"
            )
        return np.stack([self.image(i) for i in range(start, start + size)])

    def batches(self, batch_size):
        """Consecutive batches covering the dataset (remainder dropped)."""
        for start in range(0, self.count - batch_size + 1, batch_size):
            yield self.batch(start, batch_size)


def replicate_channels(t):
    """Duplicate a single-channel (N,1,H,W) batch across three channels."""
    t = np.asarray(t)
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeMismatchError(f"channel replication needs (N,1,H,W), got {t.shape}")
    return np.repeat(t, 3, axis=1)


def _adapt_channels(batch, model_channels):
    if batch.shape[1] == model_channels:
        return batch
    if batch.shape[1] == 1 and model_channels == 3:
        return replicate_channels(batch)
    raise ShapeMismatchError(
        f"dataset has {batch.shape[1]} channels, model expects {model_channels}"
    )


def absorb_bn_stats(model, data, momentum=0.1, batch_size=8):
    """New graph whose BN running stats are EMAs of per-batch statistics.

    Forward passes run with training-mode normalization (each batch is
    normalized by its own statistics) but only the running mean/std move;
    weights are untouched. Single-channel data is replicated to three
    channels when the model expects three.
    """
    if data.count == 0:
        raise DataError("cannot absorb batch-norm statistics from an empty dataset")
    if not 0.0 < momentum <= 1.0:
        raise ConfigError(f"momentum must be in (0, 1], got {momentum}")
    running = {
        i: (
            model.layers[i].running_mean.astype(np.float64).copy(),
            model.layers[i].running_std.astype(np.float64).copy(),
        )
        for i in model.bn_indices
    }
    batch_size = min(batch_size, data.count)
    for raw in data.batches(batch_size):
        x = _adapt_channels(raw, model.input_shape[0])
        for i, layer in enumerate(model.layers):
            if isinstance(layer, BatchNorm2d):
                mean, std = batch_stats(x)
                var = np.square(x.astype(np.float64) - mean[None, :, None, None]).mean(
                    axis=(0, 2, 3)
                )
                mu, sigma = running[i]
                running[i] = (
                    (1.0 - momentum) * mu + momentum * mean,
                    (1.0 - momentum) * sigma + momentum * std,
                )
                scale = layer.gamma.astype(np.float64) / np.sqrt(var + layer.epsilon)
                x = (
                    scale[None, :, None, None] * (x - mean[None, :, None, None])
                    + layer.beta.astype(np.float64)[None, :, None, None]
                ).astype(np.float32)
            else:
                x = layer.forward(x)
    layers = list(model.layers)
    for i in model.bn_indices:
        old = model.layers[i]
        mu, sigma = running[i]
        layers[i] = BatchNorm2d(old.gamma, old.beta, mu, sigma, epsilon=old.epsilon)
    return ModelGraph(layers, model.input_shape)


def write_pgm(path, image2d):
    """8-bit binary PGM (P5), min/max rescaled; constant images come out mid-gray."""
    img = np.asarray(image2d, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"PGM export needs a 2-D image, got {img.shape}")
    lo, hi = img.min(), img.max()
    if hi > lo:
        scaled = np.rint((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full_like(img, 128.0)
    body = scaled.clip(0, 255).astype(np.uint8).tobytes()
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    write_atomic(path, header + body)


def export_batch_images(batch4d, out_dir, prefix="img"):
    """Per-image grayscale (channel-averaged) and per-channel PGMs."""
    batch = np.asarray(batch4d)
    if batch.ndim != 4:
        raise ShapeMismatchError(f"image export needs (N,C,H,W), got {batch.shape}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for n in range(batch.shape[0]):
        gray = os.path.join(out_dir, f"{prefix}_{n:03d}_gray.pgm")
        write_pgm(gray, batch[n].mean(axis=0))
        written.append(gray)
        for c in range(batch.shape[1]):
            per = os.path.join(out_dir, f"{prefix}_{n:03d}_c{c}.pgm")
            write_pgm(per, batch[n, c])
            written.append(per)
    return written


def export_raw_tensor(path, tensor):
    """Raw little-endian float32 dump, row-major."""
    write_atomic(path, np.ascontiguousarray(tensor, dtype="<f4").tobytes())
