"""Streaming activation statistics and clipping-range selection.

Each activation site gets a HistogramCollector: running min/max plus a
fixed-width histogram that is re-binned (counts redistributed
proportionally, integer totals conserved exactly) whenever the observed
range grows. Ranges are then selected by min/max, two-sided percentile
with in-bin linear interpolation, or an entropy search over upper-tail
truncations.
"""

import json
from dataclasses import dataclass

import numpy as np

from .engine import Conv2d, Linear, forward_layer_outputs
from .errors import CalibrationError, ConfigError, DataError, NonFiniteError
from .modelio import write_atomic
from .quantize import CalibRange, activation_sites, weight_minmax_ranges, widened_range

DEFAULT_BIN_COUNT = 2048
KL_SMOOTHING = 1e-12


def _largest_remainder(total, fractions):
    """Split an integer `total` by `fractions` (summing to ~1), conserving it exactly."""
    shares = total * fractions
    base = np.floor(shares).astype(np.int64)
    leftover = int(total - base.sum())
    if leftover > 0:
        # ties broken toward lower index for determinism
        order = np.lexsort((np.arange(len(fractions)), -(shares - base)))
        base[order[:leftover]] += 1
    elif leftover < 0:  # fp slack in fractions; shave from the largest shares
        order = np.argsort(-base, kind="stable")
        for idx in order[: -leftover]:
            base[idx] -= 1
    return base


class HistogramCollector:
    """Mergeable streaming histogram for one activation site."""

    def __init__(self, site, bin_count=DEFAULT_BIN_COUNT):
        if bin_count < 2:
            raise ConfigError(f"bin_count must be >= 2, got {bin_count}")
        self.site = site
        self.bin_count = int(bin_count)
        self.observed_min = None
        self.observed_max = None
        self.counts = np.zeros(self.bin_count, dtype=np.int64)
        self.total_count = 0

    @property
    def degenerate(self):
        return self.observed_min is not None and self.observed_min == self.observed_max

    def edges(self):
        if self.observed_min is None or self.degenerate:
            return None
        return np.linspace(self.observed_min, self.observed_max, self.bin_count + 1)

    def bin_width(self):
        if self.observed_min is None or self.degenerate:
            return 0.0
        return (self.observed_max - self.observed_min) / self.bin_count

    def _rebin(self, new_min, new_max):
        """Redistribute current counts onto a [new_min, new_max] grid."""
        new_counts = np.zeros(self.bin_count, dtype=np.int64)
        new_edges = np.linspace(new_min, new_max, self.bin_count + 1)
        if self.degenerate:
            j = min(np.searchsorted(new_edges, self.observed_min, side="right") - 1,
                    self.bin_count - 1)
            new_counts[max(j, 0)] = self.total_count
        else:
            old_edges = self.edges()
            for b in np.nonzero(self.counts)[0]:
                left, right = old_edges[b], old_edges[b + 1]
                j0 = max(int(np.searchsorted(new_edges, left, side="right")) - 1, 0)
                j1 = min(int(np.searchsorted(new_edges, right, side="left")) - 1,
                         self.bin_count - 1)
                j1 = max(j1, j0)
                if j0 == j1:
                    new_counts[j0] += self.counts[b]
                    continue
                overlaps = np.minimum(new_edges[j0 + 1 : j1 + 2], right) - np.maximum(
                    new_edges[j0 : j1 + 1], left
                )
                overlaps = np.clip(overlaps, 0.0, None)
                fractions = overlaps / (right - left)
                new_counts[j0 : j1 + 1] += _largest_remainder(int(self.counts[b]), fractions)
        self.counts = new_counts
        self.observed_min = new_min
        self.observed_max = new_max

    def observe(self, t):
        """Fold a tensor's values into the histogram; returns self."""
        x = np.asarray(t, dtype=np.float64).ravel()
        if x.size == 0:
            return self
        if not np.isfinite(x).all():
            raise NonFiniteError(f"site {self.site}: non-finite values in calibration data")
        tmin, tmax = float(x.min()), float(x.max())
        if self.total_count == 0:
            self.observed_min, self.observed_max = tmin, tmax
        elif tmin < self.observed_min or tmax > self.observed_max:
            self._rebin(min(tmin, self.observed_min), max(tmax, self.observed_max))
        if self.observed_min == self.observed_max:
            self.counts[0] += x.size
        else:
            hist, _ = np.histogram(x, bins=self.edges())
            self.counts += hist
        self.total_count += int(x.size)
        return self

    def merge(self, other):
        """New collector holding both histories; totals are conserved exactly."""
        if other.bin_count != self.bin_count:
            raise ConfigError("cannot merge collectors with different bin counts")
        merged = HistogramCollector(self.site, self.bin_count)
        for col in (self, other):
            if col.total_count == 0:
                continue
            if merged.total_count == 0:
                merged.observed_min = col.observed_min
                merged.observed_max = col.observed_max
                merged.counts = col.counts.copy()
                merged.total_count = col.total_count
                continue
            lo = min(merged.observed_min, col.observed_min)
            hi = max(merged.observed_max, col.observed_max)
            if (lo, hi) != (merged.observed_min, merged.observed_max):
                merged._rebin(lo, hi)
            contrib = HistogramCollector(col.site, col.bin_count)
            contrib.observed_min = col.observed_min
            contrib.observed_max = col.observed_max
            contrib.counts = col.counts.copy()
            contrib.total_count = col.total_count
            if (lo, hi) != (contrib.observed_min, contrib.observed_max):
                contrib._rebin(lo, hi)
            merged.counts += contrib.counts
            merged.total_count += contrib.total_count
        return merged

    def quantile(self, q):
        """Empirical quantile with linear interpolation inside bins."""
        if self.total_count == 0:
            raise CalibrationError(f"site {self.site}: no observations")
        if self.degenerate:
            return self.observed_min
        target = q * self.total_count
        cum = np.cumsum(self.counts)
        j = int(np.searchsorted(cum, target, side="left"))
        j = min(j, self.bin_count - 1)
        while self.counts[j] == 0 and j < self.bin_count - 1:
            j += 1
        edges = self.edges()
        prev = cum[j] - self.counts[j]
        frac = np.clip((target - prev) / self.counts[j], 0.0, 1.0) if self.counts[j] else 0.0
        value = edges[j] + frac * (edges[j + 1] - edges[j])
        return float(np.clip(value, self.observed_min, self.observed_max))


@dataclass(frozen=True)
class RangeSelector:
    """Range-selection policy: method, percentile threshold, target bit-width."""

    method: str = "percentile"
    percentile: float = 99.99
    bits: int = 8

    def __post_init__(self):
        if self.method not in ("minmax", "percentile", "entropy"):
            raise ConfigError(
                f"method must be minmax/percentile/entropy, got {self.method!r}"
            )
        if not 50.0 < self.percentile <= 100.0:
            raise ConfigError(f"percentile must be in (50, 100], got {self.percentile}")
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")


def _entropy_upper_edge(col, bits):
    """Upper clip minimizing KL(reference || clipped-and-requantized).

    Candidate clips are bin boundaries at least 2^bits bins in; the
    clipped tail mass is folded into the edge bin, the kept bins are
    requantized to 2^bits levels (uniform within each level over its
    occupied bins), and zero probabilities are smoothed.
    """
    levels = 2**bits
    n = col.bin_count
    if n <= levels:
        return col.observed_max
    counts = col.counts.astype(np.float64)
    total = counts.sum()
    ref = counts / total
    ref_nz = ref > 0
    edges = col.edges()
    best_kl = np.inf
    best_i = n
    for i in range(levels, n + 1):
        cand = counts[:i].copy()
        cand[i - 1] += counts[i:].sum()
        starts = (np.arange(levels) * i) // levels
        group_of = np.searchsorted(starts, np.arange(i), side="right") - 1
        sums = np.add.reduceat(cand, starts)
        occupied = np.add.reduceat((cand > 0).astype(np.float64), starts)
        per_bin = np.zeros(i)
        nz = cand > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            values = sums / occupied
        per_bin[nz] = values[group_of[nz]]
        q = np.zeros(n)
        q[:i] = per_bin
        q /= total
        kl = float(np.sum(ref[ref_nz] * np.log(ref[ref_nz] / (q[ref_nz] + KL_SMOOTHING))))
        if kl < best_kl:
            best_kl = kl
            best_i = i
    return float(edges[best_i])


def select_range(col, sel):
    """Clipping range for one collector under the given policy.

    Degenerate outcomes (constant data) are widened so the returned range
    is always usable by the quantizer.
    """
    if col.total_count == 0:
        raise CalibrationError(f"site {col.site}: cannot select a range with no observations")
    if col.degenerate:
        return widened_range(col.observed_min, col.observed_max)
    if sel.method == "minmax":
        lo, hi = col.observed_min, col.observed_max
    elif sel.method == "percentile":
        upper_q = sel.percentile / 100.0
        lo = col.quantile(1.0 - upper_q)
        hi = col.quantile(upper_q)
    else:
        lo = col.observed_min
        hi = _entropy_upper_edge(col, sel.bits)
    return widened_range(lo, hi)


def collect_model_histograms(model, batches, bin_count=DEFAULT_BIN_COUNT):
    """One collector per activation site, filled by forwarding all batches."""
    sites = activation_sites(model)
    collectors = {site: HistogramCollector(site, bin_count) for site in sites}
    seen = 0
    for batch in batches:
        batch = np.asarray(batch, dtype=np.float32)
        collectors["input"].observe(batch)
        _, outputs = forward_layer_outputs(model, batch)
        for i, out in enumerate(outputs):
            collectors[f"layer{i}"].observe(out)
        seen += 1
    if seen == 0:
        raise DataError("calibration needs at least one batch")
    return collectors


def calibrate_model(model, batches, sel, per_channel_weights=False, bin_count=DEFAULT_BIN_COUNT):
    """Activation ranges from forwarded batches plus exact min/max weight ranges.

    Weight tensors are fully visible, so they always use exact min/max
    regardless of the activation policy.
    """
    collectors = collect_model_histograms(model, batches, bin_count)
    activation_ranges = {site: select_range(col, sel) for site, col in collectors.items()}
    weight_ranges = weight_minmax_ranges(model, per_channel=per_channel_weights)
    return activation_ranges, weight_ranges


def save_calibration(path, activation_ranges, weight_ranges, sel):
    """Structured-text calibration result: site/tensor -> {a, c, method, p}."""
    def encode(r):
        entry = {"lower": r.lower, "upper": r.upper, "method": sel.method}
        if sel.method == "percentile":
            entry["p"] = sel.percentile
        return entry

    doc = {
        "format_version": 1,
        "method": sel.method,
        "percentile": sel.percentile if sel.method == "percentile" else None,
        "activations": {site: encode(r) for site, r in activation_ranges.items()},
        "weights": {
            key: ({"channels": [[r.lower, r.upper] for r in rng]}
                  if isinstance(rng, (tuple, list)) else encode(rng))
            for key, rng in weight_ranges.items()
        },
    }
    write_atomic(path, json.dumps(doc, sort_keys=True, indent=2).encode("utf-8"))


def load_calibration(path):
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read calibration file {path}: {exc}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed calibration file {path}: {exc}") from exc
    try:
        activation_ranges = {
            site: CalibRange(float(e["lower"]), float(e["upper"]))
            for site, e in doc["activations"].items()
        }
        weight_ranges = {}
        for key, e in doc["weights"].items():
            if "channels" in e:
                weight_ranges[key] = [CalibRange(float(l), float(u)) for l, u in e["channels"]]
            else:
                weight_ranges[key] = CalibRange(float(e["lower"]), float(e["upper"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed calibration file {path}: {exc}") from exc
    return activation_ranges, weight_ranges
