"""Sequential CNN engine on dense numpy arrays.

Supports exactly the layer set needed downstream (conv, batchnorm, relu,
max/avg pool, flatten, linear), a forward pass that can capture the input
of every batch-norm layer, and reverse-mode differentiation with respect
to the network input only. Weights are frozen: graphs never train.

Activations are row-major float32 arrays, (N, C, H, W) for images and
(N, F) after flattening. All layer code is dtype-preserving so the same
path can be driven in float64 by verification tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError, UnsupportedLayerError

# stabilizer under the square root of batch std; keeps std differentiable
# at zero variance
STAT_EPS = 1e-8


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected scalar or pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


class Layer:
    """Base class; concrete layers implement out_shape/forward/backward."""

    KIND = "?"

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, gy):
        """Gradient of a scalar loss w.r.t. this layer's input.

        `x` is the input that produced the forward output, `gy` the
        gradient w.r.t. the output. Parameters are constants.
        """
        raise NotImplementedError

    def params(self):
        """Named parameter arrays, in serialization order."""
        return {}

    def hyperparams(self):
        """Structural attributes for the manifest (no arrays)."""
        return {}


def _conv_cols(x, kh, kw, sh, sw, ph, pw, ho, wo):
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols


class Conv2d(Layer):
    KIND = "Conv2d"

    def __init__(self, weight, bias, stride=1, padding=0):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ValueError(
                f"conv bias shape {bias.shape} does not match {weight.shape[0]} output channels"
            )
        self.weight = _freeze(weight)
        self.bias = _freeze(bias)
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"conv expects (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        cout, cin, kh, kw = self.weight.shape
        if c != cin:
            raise ValueError(f"conv expects {cin} input channels, got {c}")
        sh, sw = self.stride
        ph, pw = self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv kernel {kh}x{kw} does not fit input {h}x{w}")
        return (cout, ho, wo)

    def forward(self, x):
        cout, cin, kh, kw = self.weight.shape
        sh, sw = self.stride
        ph, pw = self.padding
        _, ho, wo = self.out_shape(x.shape[1:])
        n = x.shape[0]
        cols = _conv_cols(x, kh, kw, sh, sw, ph, pw, ho, wo)
        cols = cols.reshape(n, cin * kh * kw, ho * wo)
        w2 = self.weight.reshape(cout, cin * kh * kw).astype(x.dtype, copy=False)
        out = np.matmul(w2, cols)  # (n, cout, ho*wo)
        out += self.bias.astype(x.dtype, copy=False)[:, None]
        return out.reshape(n, cout, ho, wo)

    def backward(self, x, gy):
        cout, cin, kh, kw = self.weight.shape
        sh, sw = self.stride
        ph, pw = self.padding
        n, _, ho, wo = gy.shape
        w2 = self.weight.reshape(cout, cin * kh * kw).astype(x.dtype, copy=False)
        g2 = gy.reshape(n, cout, ho * wo)
        gcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, ho, wo)
        h, w = x.shape[2], x.shape[3]
        gxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, i, j]
        return gxp[:, :, ph : ph + h, pw : pw + w]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def hyperparams(self):
        return {"stride": list(self.stride), "padding": list(self.padding)}


class BatchNorm2d(Layer):
    """Inference-mode batch norm over stored running statistics.

    The running spread is stored as a standard deviation, not a variance.
    """

    KIND = "BatchNorm2d"

    def __init__(self, gamma, beta, running_mean, running_std, epsilon=1e-5):
        gamma = np.asarray(gamma)
        c = gamma.shape[0] if gamma.ndim == 1 else -1
        for name, arr in (("gamma", gamma), ("beta", np.asarray(beta)),
                          ("running_mean", np.asarray(running_mean)),
                          ("running_std", np.asarray(running_std))):
            if np.asarray(arr).shape != (c,):
                raise ValueError(f"batchnorm {name} must have shape ({c},)")
        if epsilon < 0:
            raise ValueError("batchnorm epsilon must be >= 0")
        if not np.all(np.asarray(running_std) > 0):
            raise ValueError("batchnorm running_std must be positive in every channel")
        self.gamma = _freeze(gamma)
        self.beta = _freeze(beta)
        self.running_mean = _freeze(running_mean)
        self.running_std = _freeze(running_std)
        self.epsilon = float(epsilon)
        self._scale32 = _freeze(
            self.gamma / np.sqrt(np.square(self.running_std) + np.float32(self.epsilon))
        )

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.gamma.shape[0]:
            raise ValueError(
                f"batchnorm over {self.gamma.shape[0]} channels got input {in_shape}"
            )
        return in_shape

    def _scale(self, dtype):
        if dtype == np.float32:
            return self._scale32
        std = self.running_std.astype(dtype, copy=False)
        denom = np.sqrt(std * std + dtype.type(self.epsilon))
        return self.gamma.astype(dtype, copy=False) / denom

    def forward(self, x):
        scale = self._scale(x.dtype)[:, None, None]
        mean = self.running_mean.astype(x.dtype, copy=False)[:, None, None]
        beta = self.beta.astype(x.dtype, copy=False)[:, None, None]
        return scale * (x - mean) + beta

    def backward(self, x, gy):
        return gy * self._scale(x.dtype)[:, None, None]

    def params(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_std": self.running_std,
        }

    def hyperparams(self):
        return {"epsilon": self.epsilon}


class ReLU(Layer):
    KIND = "ReLU"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, gy):
        # subgradient at 0 is 0
        return gy * (x > 0)


class _Pool2d(Layer):
    def __init__(self, kernel=2, stride=None):
        self.kernel = _pair(kernel)
        self.stride = _pair(stride) if stride is not None else self.kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"pool expects (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = self.kernel
        sh, sw = self.stride
        if h < kh or w < kw:
            raise ValueError(f"pool window {kh}x{kw} does not fit input {h}x{w}")
        return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)

    def hyperparams(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}

    def _windows(self, x, ho, wo):
        kh, kw = self.kernel
        sh, sw = self.stride
        for i in range(kh):
            for j in range(kw):
                yield i * kw + j, (i, j), x[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]


class MaxPool2d(_Pool2d):
    KIND = "MaxPool2d"

    def _tiled(self, x, ho, wo):
        # non-overlapping windows covering the input exactly: pure reshape
        kh, kw = self.kernel
        sh, sw = self.stride
        n, c, h, w = x.shape
        if (sh, sw) == (kh, kw) and h == ho * kh and w == wo * kw:
            return x.reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5)
        return None

    def _argmax(self, x, ho, wo):
        best = None
        arg = None
        for t, _, view in self._windows(x, ho, wo):
            if best is None:
                best = view.copy()
                arg = np.zeros(view.shape, dtype=np.int32)
            else:
                # strict > keeps the first maximal offset in scan order on ties
                mask = view > best
                np.copyto(best, view, where=mask)
                arg[mask] = t
        return best, arg

    def forward(self, x):
        _, ho, wo = self.out_shape(x.shape[1:])
        tiles = self._tiled(x, ho, wo)
        if tiles is not None:
            kh, kw = self.kernel
            return tiles.reshape(*tiles.shape[:4], kh * kw).max(axis=-1)
        best, _ = self._argmax(x, ho, wo)
        return best

    def backward(self, x, gy):
        _, ho, wo = self.out_shape(x.shape[1:])
        kh, kw = self.kernel
        sh, sw = self.stride
        tiles = self._tiled(x, ho, wo)
        if tiles is not None:
            flat = tiles.reshape(*tiles.shape[:4], kh * kw)
            # np.argmax returns the first maximum, preserving the scan-order tie-break
            arg = np.argmax(flat, axis=-1)
            gw = np.zeros(flat.shape, dtype=x.dtype)
            np.put_along_axis(gw, arg[..., None], gy[..., None].astype(x.dtype, copy=False), axis=-1)
            n, c = x.shape[:2]
            return (
                gw.reshape(n, c, ho, wo, kh, kw)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(x.shape)
            )
        _, arg = self._argmax(x, ho, wo)
        gx = np.zeros_like(x)
        for t, (i, j), _ in self._windows(x, ho, wo):
            gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.where(arg == t, gy, 0)
        return gx


class AvgPool2d(_Pool2d):
    KIND = "AvgPool2d"

    def forward(self, x):
        _, ho, wo = self.out_shape(x.shape[1:])
        acc = None
        for _, _, view in self._windows(x, ho, wo):
            acc = view.copy() if acc is None else acc + view
        return acc / x.dtype.type(self.kernel[0] * self.kernel[1])

    def backward(self, x, gy):
        gx = np.zeros_like(x)
        kh, kw = self.kernel
        sh, sw = self.stride
        _, ho, wo = self.out_shape(x.shape[1:])
        share = gy / x.dtype.type(kh * kw)
        for _, (i, j), _ in self._windows(x, ho, wo):
            gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += share
        return gx


class Flatten(Layer):
    KIND = "Flatten"

    def out_shape(self, in_shape):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, gy):
        return gy.reshape(x.shape)


class Linear(Layer):
    KIND = "Linear"

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2:
            raise ValueError(f"linear weight must be rank 2, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ValueError(
                f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs"
            )
        self.weight = _freeze(weight)
        self.bias = _freeze(bias)

    def out_shape(self, in_shape):
        fo, fi = self.weight.shape
        if len(in_shape) != 1 or in_shape[0] != fi:
            raise ValueError(f"linear expects ({fi},) features, got {in_shape}")
        return (fo,)

    def forward(self, x):
        w = self.weight.astype(x.dtype, copy=False)
        return x @ w.T + self.bias.astype(x.dtype, copy=False)

    def backward(self, x, gy):
        return gy @ self.weight.astype(x.dtype, copy=False)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


LAYER_KINDS = {
    cls.KIND: cls
    for cls in (Conv2d, BatchNorm2d, ReLU, MaxPool2d, AvgPool2d, Flatten, Linear)
}


class ModelGraph:
    """Immutable sequential network: layer list plus its (C,H,W) input shape.

    Shape propagation is validated at construction; `bn_indices` enumerates
    the batch-norm layers in order.
    """

    def __init__(self, layers, input_shape):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        self._shapes = [shape]
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, Layer) or layer.KIND not in LAYER_KINDS:
                raise UnsupportedLayerError(f"layer {i} has unsupported kind {layer!r}")
            try:
                shape = layer.out_shape(shape)
            except ValueError as exc:
                raise ShapeMismatchError(f"layer {i} ({layer.KIND}): {exc}", layer_index=i) from exc
            self._shapes.append(shape)
        self.output_shape = shape
        self.bn_indices = tuple(
            i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm2d)
        )

    def __len__(self):
        return len(self.layers)

    def layer_output_shape(self, index):
        return self._shapes[index + 1]

    def parameter_count(self):
        return sum(int(np.prod(a.shape)) for l in self.layers for a in l.params().values())


@dataclass
class ActivationTrace:
    """Captured pre-layer inputs, keyed by layer index (batch-norm sites)."""

    taps: dict = field(default_factory=dict)


def _check_input(model, x):
    if x.ndim != len(model.input_shape) + 1 or x.shape[0] < 1:
        raise ShapeMismatchError(
            f"input must be (N,{','.join(map(str, model.input_shape))}), got {x.shape}"
        )
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeMismatchError(
            f"input shape {tuple(x.shape[1:])} does not match model input {model.input_shape}"
        )
    if not np.isfinite(x).all():
        raise NonFiniteError("network input contains non-finite values")


def forward_trace(model, x):
    """Run the graph, returning the output and every layer's input tensor."""
    _check_input(model, x)
    inputs = []
    cur = x
    for i, layer in enumerate(model.layers):
        inputs.append(cur)
        cur = layer.forward(cur)
        if not np.isfinite(cur).all():
            raise NonFiniteError(
                f"layer {i} ({layer.KIND}) produced non-finite values", layer_index=i
            )
    return cur, inputs


def forward(model, x, capture_bn_taps=False):
    """Forward pass; optionally capture the input of every batch-norm layer."""
    out, inputs = forward_trace(model, x)
    taps = {}
    if capture_bn_taps:
        taps = {i: inputs[i] for i in model.bn_indices}
    return out, ActivationTrace(taps)


def forward_layer_outputs(model, x):
    """Forward pass returning the output of every layer (activation sites)."""
    out, inputs = forward_trace(model, x)
    return out, inputs[1:] + [out]


def batch_stats(t):
    """Per-channel mean and stabilized standard deviation of an (N,C,H,W) batch.

    Variance is biased (divide by N*H*W); STAT_EPS is added under the square
    root so the std stays differentiable at zero variance. Returns float64.
    """
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeMismatchError(f"batch statistics need rank-4 (N,C,H,W), got {t.shape}")
    count = t.shape[0] * t.shape[2] * t.shape[3]
    total = np.einsum("nchw->c", t, dtype=np.float64)
    sq_total = np.einsum("nchw,nchw->c", t, t, dtype=np.float64)
    mean = total / count
    var = np.maximum(sq_total / count - mean * mean, 0.0)
    return mean, np.sqrt(var + STAT_EPS)


class SumOutputLoss:
    """sum(output); gradient w.r.t. the output is all ones."""

    def value(self, trace, output):
        return float(output.sum(dtype=np.float64))

    def gradients(self, trace, output):
        return np.ones_like(output), {}


class HalfSquaredOutputLoss:
    """0.5 * ||output||^2; gradient w.r.t. the output is the output itself."""

    def value(self, trace, output):
        o = output.astype(np.float64, copy=False)
        return float(0.5 * np.sum(o * o))

    def gradients(self, trace, output):
        return output.copy(), {}


def backprop_input(model, inputs, grad_output, tap_grads):
    """Reverse sweep through the layer list.

    `inputs` is the per-layer input list from forward_trace, `grad_output`
    the loss gradient w.r.t. the final output (or None for zero), and
    `tap_grads` maps layer indices to loss gradients w.r.t. that layer's
    input (injected as the sweep passes the tap).
    """
    x = inputs[0]
    if grad_output is None:
        g = np.zeros((x.shape[0],) + model.output_shape, dtype=x.dtype)
    else:
        g = grad_output.astype(x.dtype, copy=False)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if type(layer).backward is Layer.backward:
            raise UnsupportedLayerError(f"layer {i} ({layer.KIND}) has no backward rule")
        g = layer.backward(inputs[i], g)
        extra = tap_grads.get(i)
        if extra is not None:
            g = g + extra.astype(g.dtype, copy=False)
    return g


def grad_input(model, x, loss):
    """Exact loss gradient with respect to the input, parameters frozen.

    `loss` exposes value(trace, output) -> float and gradients(trace, output)
    -> (grad_wrt_output | None, {layer_index: grad_wrt_tap}); it may depend
    only on the captured batch-norm taps and the final output.
    """
    out, inputs = forward_trace(model, x)
    trace = ActivationTrace({i: inputs[i] for i in model.bn_indices})
    value = loss.value(trace, out)
    if not np.isfinite(value):
        raise NonFiniteError("loss value is non-finite")
    grad_output, tap_grads = loss.gradients(trace, out)
    grad = backprop_input(model, inputs, grad_output, tap_grads)
    return value, grad
