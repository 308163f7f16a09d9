"""Uniform asymmetric (affine) quantization.

A k-bit code grid spans a clipping range [lower, upper]: the range is cut
into 2^k - 1 equal intervals of width `scale`, real zero maps to the
integer `zero_point`, and codes live in [-2^(k-1), 2^(k-1) - 1]. Rounding
is half-away-from-zero everywhere. Quantization arithmetic runs in
float64 so a per-element scalar oracle can match it exactly.
"""

import json
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .engine import Conv2d, Linear, ModelGraph, forward
from .errors import (
    BlobBoundsError,
    ChecksumMismatchError,
    ConfigError,
    DegenerateRangeError,
    FormatVersionError,
    ManifestError,
    MissingRangeError,
    NonFiniteError,
)
from .modelio import _build_layer, read_container, write_container

QUANT_MAGIC = b"ZSQQNT01"
QUANT_FORMAT_VERSION = 1

# range half-width used when widening a zero-width clipping range
DEGENERATE_WIDENING = 1e-8


@dataclass(frozen=True)
class CalibRange:
    """Clipping range: reals outside [lower, upper] saturate."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (self.lower < self.upper):
            raise DegenerateRangeError(
                f"clipping range needs lower < upper, got [{self.lower}, {self.upper}]"
            )


def widened_range(lower, upper):
    """CalibRange from raw bounds, widening a degenerate span with a warning."""
    if lower >= upper:
        warnings.warn(
            f"degenerate clipping range [{lower}, {upper}]; widening by {DEGENERATE_WIDENING}",
            stacklevel=2,
        )
        return CalibRange(lower - DEGENERATE_WIDENING, upper + DEGENERATE_WIDENING)
    return CalibRange(float(lower), float(upper))


@dataclass(frozen=True)
class QuantParams:
    """Grid parameters: interval width, integer code of real zero, bit-width."""

    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bit-width must be in [2, 8], got {self.bits}")
        lo, hi = code_bounds(self.bits)
        if not lo <= self.zero_point <= hi:
            raise ConfigError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")


def code_bounds(bits):
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def round_half_away(v):
    """Round to nearest, halves away from zero (works on arrays and scalars)."""
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def compute_params(crange, bits):
    """Grid parameters for a clipping range.

    scale = (upper - lower) / (2^k - 1); the zero point is the code real
    zero would take, clamped into the representable range (the raw formula
    can leave it when the range excludes zero).
    """
    if not 2 <= bits <= 8:
        raise ConfigError(f"bit-width must be in [2, 8], got {bits}")
    if not (crange.lower < crange.upper):
        raise DegenerateRangeError(
            f"clipping range needs lower < upper, got [{crange.lower}, {crange.upper}]"
        )
    scale = (float(crange.upper) - float(crange.lower)) / (2**bits - 1)
    lo, hi = code_bounds(bits)
    zero = -float(round_half_away(crange.lower / scale)) + lo
    zero_point = int(min(max(zero, lo), hi))
    return QuantParams(scale=scale, zero_point=zero_point, bits=bits)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the grid they live on.

    `params` is a single QuantParams (per-tensor) or a tuple with one entry
    per leading-axis slice (per-channel).
    """

    shape: tuple
    payload: np.ndarray  # int8, already clamped
    params: object

    @property
    def per_channel(self):
        return isinstance(self.params, tuple)


def _encode(x64, params):
    lo, hi = code_bounds(params.bits)
    codes = round_half_away(x64 / params.scale) + params.zero_point
    return np.clip(codes, lo, hi)


def quantize(x, params):
    """Map a real tensor onto the integer grid (saturating at the clip range)."""
    x = np.asarray(x)
    x64 = x.astype(np.float64, copy=False)
    if isinstance(params, (tuple, list)):
        params = tuple(params)
        if len(params) != x.shape[0]:
            raise ConfigError(
                f"per-channel quantization needs {x.shape[0]} parameter sets, got {len(params)}"
            )
        codes = np.empty(x.shape, dtype=np.float64)
        for c, p in enumerate(params):
            codes[c] = _encode(x64[c], p)
    else:
        codes = _encode(x64, params)
    return QuantizedTensor(shape=tuple(x.shape), payload=codes.astype(np.int8), params=params)


def dequantize(qt):
    """Real-valued reconstruction (code - zero_point) * scale, float32."""
    q64 = qt.payload.astype(np.float64)
    if qt.per_channel:
        out = np.empty(qt.shape, dtype=np.float64)
        for c, p in enumerate(qt.params):
            out[c] = (q64[c] - p.zero_point) * p.scale
    else:
        out = (q64 - qt.params.zero_point) * qt.params.scale
    return out.astype(np.float32)


def fake_quantize(x, params):
    """Simulated quantization: project onto the grid, return reals."""
    return dequantize(quantize(x, params))


def _weight_keys(model):
    return [
        f"layer{i}.weight"
        for i, layer in enumerate(model.layers)
        if isinstance(layer, (Conv2d, Linear))
    ]


def activation_sites(model):
    """Site identifiers: the model input plus every layer output."""
    return ["input"] + [f"layer{i}" for i in range(len(model.layers))]


def weight_minmax_ranges(model, per_channel=False):
    """Exact min/max clipping ranges taken from the weight values themselves."""
    ranges = {}
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Conv2d, Linear)):
            continue
        w = layer.weight
        if per_channel:
            flat = w.reshape(w.shape[0], -1)
            ranges[f"layer{i}.weight"] = [
                widened_range(float(row.min()), float(row.max())) for row in flat
            ]
        else:
            ranges[f"layer{i}.weight"] = widened_range(float(w.min()), float(w.max()))
    return ranges


class QuantizedModel:
    """A graph with quantized weights and per-site activation grids.

    `bits=None` disables fake quantization entirely (pass-through mode used
    for sanity checks); otherwise every tensor runs at the given bit-width.
    BN parameters and conv/linear biases stay full precision.
    """

    def __init__(self, model, weights, activation_params, bits):
        self.graph = model
        self.weights = dict(weights)
        self.activation_params = dict(activation_params)
        self.bits = bits
        self._exec_graph = self._build_exec_graph()

    @classmethod
    def passthrough(cls, model):
        return cls(model, {}, {}, bits=None)

    def _build_exec_graph(self):
        if self.bits is None:
            return self.graph
        layers = []
        for i, layer in enumerate(self.graph.layers):
            key = f"layer{i}.weight"
            if isinstance(layer, Conv2d):
                layers.append(
                    Conv2d(
                        dequantize(self.weights[key]),
                        layer.bias,
                        stride=layer.stride,
                        padding=layer.padding,
                    )
                )
            elif isinstance(layer, Linear):
                layers.append(Linear(dequantize(self.weights[key]), layer.bias))
            else:
                layers.append(layer)
        return ModelGraph(layers, self.graph.input_shape)


def quantize_model(model, weight_ranges, activation_ranges, bits):
    """Quantize all conv/linear weights and attach activation-site grids.

    `weight_ranges` maps "layer<i>.weight" to a CalibRange (per-tensor) or a
    list of CalibRange (per-channel along the output axis; granularity is
    inferred from the entry type); `activation_ranges` maps every site from
    activation_sites() to a CalibRange. Missing entries are reported together.
    """
    need_w = set(_weight_keys(model))
    need_a = set(activation_sites(model))
    missing = (need_w - set(weight_ranges)) | (need_a - set(activation_ranges))
    if missing:
        raise MissingRangeError(missing)

    weights = {}
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Conv2d, Linear)):
            continue
        key = f"layer{i}.weight"
        crange = weight_ranges[key]
        if isinstance(crange, (tuple, list)):
            params = tuple(compute_params(r, bits) for r in crange)
        else:
            params = compute_params(crange, bits)
        weights[key] = quantize(layer.weight, params)

    act_params = {site: compute_params(activation_ranges[site], bits) for site in need_a}
    return QuantizedModel(model, weights, act_params, bits)


def forward_quantized(qm, x):
    """Simulated integer inference: fake-quantize the input and every layer output."""
    if qm.bits is None:
        out, _ = forward(qm.graph, x)
        return out
    x = np.asarray(x, dtype=np.float32)
    cur = fake_quantize(x, qm.activation_params["input"])
    for i, layer in enumerate(qm._exec_graph.layers):
        cur = layer.forward(cur)
        if not np.isfinite(cur).all():
            raise NonFiniteError(
                f"layer {i} ({layer.KIND}) produced non-finite values", layer_index=i
            )
        cur = fake_quantize(cur, qm.activation_params[f"layer{i}"])
    return cur


def _params_json(params):
    if isinstance(params, tuple):
        return {
            "bits": params[0].bits,
            "channel_params": [[p.scale, p.zero_point] for p in params],
        }
    return {"scale": params.scale, "zero_point": params.zero_point, "bits": params.bits}


def _params_from_json(obj):
    try:
        if "channel_params" in obj:
            bits = int(obj["bits"])
            return tuple(
                QuantParams(scale=float(s), zero_point=int(z), bits=bits)
                for s, z in obj["channel_params"]
            )
        return QuantParams(
            scale=float(obj["scale"]), zero_point=int(obj["zero_point"]), bits=int(obj["bits"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed quantization parameters: {obj!r}") from exc


def save_quantized_model(qm, path):
    """Write `<name>.q.zsq`: manifest + int8 weight payloads + fp32 side data."""
    if qm.bits is None:
        raise ConfigError("pass-through models have no quantized payload to serialize")
    layers = []
    blob_parts = []
    offset = 0

    def emit(name, data):
        nonlocal offset
        blob_parts.append(data)
        entry = {"offset": offset, "length": len(data)}
        offset += len(data)
        return entry

    for i, layer in enumerate(qm.graph.layers):
        desc = {"kind": layer.KIND}
        desc.update(layer.hyperparams())
        if isinstance(layer, (Conv2d, Linear)):
            qt = qm.weights[f"layer{i}.weight"]
            entry = emit(f"layer{i}.weight", np.ascontiguousarray(qt.payload).tobytes())
            entry["dtype"] = "int8"
            entry["shape"] = list(qt.shape)
            entry["quant"] = _params_json(qt.params)
            bentry = emit(f"layer{i}.bias", np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
            bentry["dtype"] = "float32"
            bentry["shape"] = list(layer.bias.shape)
            desc["params"] = {"weight": entry, "bias": bentry}
        else:
            desc["params"] = {}
            for name, arr in layer.params().items():
                entry = emit(name, np.ascontiguousarray(arr, dtype="<f4").tobytes())
                entry["dtype"] = "float32"
                entry["shape"] = list(arr.shape)
                desc["params"][name] = entry
        layers.append(desc)
    blob = b"".join(blob_parts)
    manifest = {
        "format_version": QUANT_FORMAT_VERSION,
        "bits": qm.bits,
        "input_shape": list(qm.graph.input_shape),
        "layers": layers,
        "activation_params": {
            site: _params_json(p) for site, p in qm.activation_params.items()
        },
        "blob_size": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    write_container(path, QUANT_MAGIC, manifest, blob)


def _read_typed_entry(blob, entry, name):
    try:
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
        length = int(entry["length"])
        dtype = entry["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"parameter {name}: malformed blob entry") from exc
    itemsize = {"int8": 1, "float32": 4}.get(dtype)
    if itemsize is None:
        raise ManifestError(f"parameter {name}: unknown dtype {dtype!r}")
    want = itemsize * int(np.prod(shape)) if shape else itemsize
    if length != want:
        raise ManifestError(f"parameter {name}: length {length} != expected {want}")
    if offset < 0 or offset + length > len(blob):
        raise BlobBoundsError(
            f"parameter {name}: [{offset}, {offset + length}) outside blob of {len(blob)} bytes"
        )
    np_dtype = np.int8 if dtype == "int8" else np.dtype("<f4")
    return np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(shape)), offset=offset).reshape(
        shape
    )


def load_quantized_model(path):
    manifest, blob = read_container(path, QUANT_MAGIC)
    version = manifest.get("format_version")
    if version != QUANT_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version}, supported {QUANT_FORMAT_VERSION}"
        )
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise ChecksumMismatchError(f"{path}: payload checksum mismatch")
    bits = manifest.get("bits")
    try:
        input_shape = tuple(int(d) for d in manifest["input_shape"])
        layer_descs = manifest["layers"]
        act_json = manifest["activation_params"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc

    weights = {}
    source_layers = []
    for i, desc in enumerate(layer_descs):
        kind = desc.get("kind")
        if kind in ("Conv2d", "Linear"):
            wentry = desc["params"]["weight"]
            payload = _read_typed_entry(blob, wentry, f"layer{i}.weight")
            params = _params_from_json(wentry.get("quant", {}))
            qt = QuantizedTensor(shape=tuple(payload.shape), payload=payload.copy(), params=params)
            weights[f"layer{i}.weight"] = qt
            bias = _read_typed_entry(blob, desc["params"]["bias"], f"layer{i}.bias")
            # the source graph carries dequantized weights; fp originals are not stored
            fp_desc = dict(desc)
            if kind == "Conv2d":
                source_layers.append(
                    Conv2d(dequantize(qt), bias, stride=fp_desc["stride"], padding=fp_desc["padding"])
                )
            else:
                source_layers.append(Linear(dequantize(qt), bias))
        else:
            fp_params = {
                name: {"shape": e["shape"], "offset": e["offset"], "length": e["length"]}
                for name, e in desc.get("params", {}).items()
            }
            float_desc = dict(desc)
            float_desc["params"] = fp_params
            # reuse the fp32 layer builder; entries here are float32 like model files
            source_layers.append(_build_fp_layer(float_desc, blob, i))
    act_params = {site: _params_from_json(obj) for site, obj in act_json.items()}
    model = ModelGraph(source_layers, input_shape)
    return QuantizedModel(model, weights, act_params, bits)


def _build_fp_layer(desc, blob, index):
    # float32 entries in the quantized container share the model-file layout
    return _build_layer(desc, blob, index)
