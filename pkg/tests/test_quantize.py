import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsq.engine import Conv2d, ModelGraph, forward
from zsq.errors import ConfigError, DegenerateRangeError, MissingRangeError
from zsq.modelio import ToyModelSpec, build_toy_model, save_model
from zsq.quantize import (
    CalibRange,
    QuantizedModel,
    QuantParams,
    activation_sites,
    compute_params,
    dequantize,
    fake_quantize,
    forward_quantized,
    load_quantized_model,
    quantize,
    quantize_model,
    save_quantized_model,
    weight_minmax_ranges,
    widened_range,
)

from conftest import rand32


# --- independent scalar oracle: the affine quantizer applied literally, ---
# --- one element at a time, in pure Python floats ---------------------------

def oracle_round(v):
    return math.copysign(math.floor(abs(v) + 0.5), v)


def oracle_quantize_scalar(x, scale, zero_point, bits):
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    code = oracle_round(float(x) / scale) + zero_point
    return int(min(max(code, lo), hi))


def oracle_dequantize_scalar(code, scale, zero_point):
    return np.float32((code - zero_point) * scale)


def oracle_params(lower, upper, bits):
    scale = (upper - lower) / (2**bits - 1)
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    zero = -oracle_round(lower / scale) + lo
    return scale, int(min(max(zero, lo), hi))


class TestComputeParams:
    def test_hand_case_0_to_255_hundredths(self):
        p = compute_params(CalibRange(0.0, 2.55), 8)
        assert p.scale == pytest.approx(0.01, rel=1e-12)
        assert p.zero_point == -128

    def test_hand_case_symmetric_unit(self):
        # round(-127.5) is -128 under half-away-from-zero, so z lands on 0
        p = compute_params(CalibRange(-1.0, 1.0), 8)
        assert p.scale == pytest.approx(2.0 / 255.0, rel=1e-12)
        assert p.zero_point == 0

    @pytest.mark.parametrize("s0", [0.5, 0.01, 3.0])
    def test_scale_is_exact_for_grid_aligned_range(self, s0):
        p = compute_params(CalibRange(0.0, 255.0 * s0), 8)
        assert p.scale == pytest.approx(s0, rel=1e-12)

    def test_degenerate_range_raises(self):
        from types import SimpleNamespace

        # bypass CalibRange validation to hit compute_params' own guard
        with pytest.raises(DegenerateRangeError):
            compute_params(SimpleNamespace(lower=1.0, upper=1.0), 8)

    def test_zero_point_clamped_for_one_sided_range(self):
        p = compute_params(CalibRange(1.0, 2.0), 8)
        assert p.zero_point == -128  # raw formula gives -383

    def test_matches_oracle_over_random_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            lo = float(rng.uniform(-10, 5))
            hi = lo + float(rng.uniform(1e-3, 20))
            bits = int(rng.choice([2, 4, 8]))
            p = compute_params(CalibRange(lo, hi), bits)
            s_ref, z_ref = oracle_params(lo, hi, bits)
            assert p.scale == s_ref
            assert p.zero_point == z_ref

    def test_bits_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            compute_params(CalibRange(0.0, 1.0), 9)

    def test_calibrange_enforces_strict_order(self):
        with pytest.raises(DegenerateRangeError):
            CalibRange(1.0, 1.0)

    def test_widened_range_warns_and_widens(self):
        with pytest.warns(UserWarning):
            r = widened_range(3.0, 3.0)
        assert r.lower < 3.0 < r.upper


class TestQuantizeDequantize:
    def test_hand_case_code_minus_28(self):
        p = QuantParams(scale=0.01, zero_point=-128, bits=8)
        qt = quantize(np.array([1.0], dtype=np.float32), p)
        assert qt.payload[0] == -28
        assert dequantize(qt)[0] == pytest.approx(1.0, abs=1e-6)

    def test_zero_maps_through_zero_point(self):
        p = compute_params(CalibRange(-1.0, 1.0), 8)
        qt = quantize(np.zeros(3, dtype=np.float32), p)
        assert (qt.payload == 0).all()
        assert (dequantize(qt) == 0.0).all()

    def test_saturation_above_range(self):
        p = compute_params(CalibRange(0.0, 2.55), 8)
        qt = quantize(np.array([1e9], dtype=np.float32), p)
        assert qt.payload[0] == 127

    def test_saturation_below_range(self):
        p = compute_params(CalibRange(0.0, 2.55), 8)
        qt = quantize(np.array([-1e9], dtype=np.float32), p)
        assert qt.payload[0] == -128

    def test_oracle_equivalence_random_configs(self):
        # acceptance-grade oracle equivalence at unit scale
        rng = np.random.default_rng(1)
        for trial in range(30):
            lo = float(rng.uniform(-8, 4))
            hi = lo + float(rng.uniform(0.01, 12))
            bits = int(rng.choice([2, 4, 8]))
            p = compute_params(CalibRange(lo, hi), bits)
            x = rng.uniform(lo - 2, hi + 2, size=500).astype(np.float32)
            qt = quantize(x, p)
            deq = dequantize(qt)
            fq = fake_quantize(x, p)
            for i in range(x.size):
                code = oracle_quantize_scalar(x[i], p.scale, p.zero_point, bits)
                assert qt.payload[i] == code
                ref = oracle_dequantize_scalar(code, p.scale, p.zero_point)
                assert deq[i] == ref
                assert fq[i] == ref

    def test_grid_points_are_fixed_points(self):
        p = compute_params(CalibRange(-2.0, 2.0), 8)
        codes = np.arange(-128, 128, dtype=np.int64)
        grid = ((codes - p.zero_point) * p.scale).astype(np.float32)
        fq = fake_quantize(grid, p)
        np.testing.assert_allclose(fq, grid, atol=1e-6)

    def test_fake_quantize_idempotent_exactly(self):
        p = compute_params(CalibRange(-3.0, 5.0), 8)
        x = rand32(1000, seed=2, scale=4.0)
        once = fake_quantize(x, p)
        twice = fake_quantize(once, p)
        assert np.array_equal(once, twice)

    def test_per_channel_payloads_use_their_own_grid(self):
        params = (
            QuantParams(scale=0.1, zero_point=0, bits=8),
            QuantParams(scale=0.01, zero_point=-10, bits=8),
        )
        x = np.array([[1.0, -0.55], [0.5, 0.02]], dtype=np.float32)
        qt = quantize(x, params)
        assert qt.payload[0, 0] == 10  # 1.0 / 0.1
        assert qt.payload[1, 0] == 40  # 0.5 / 0.01 - 10
        back = dequantize(qt)
        assert back[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert back[1, 0] == pytest.approx(0.5, abs=1e-6)


# hypothesis strategies for (range, bits) configurations containing zero;
# the round-trip bound is a theorem only when the zero point is unclamped,
# which is exactly the zero-containing case (one-sided ranges clamp z)
zero_ranges = st.tuples(
    st.floats(min_value=-100.0, max_value=-1e-3),
    st.floats(min_value=1e-3, max_value=100.0),
)


class TestQuantizerProperties:
    @given(zero_ranges, st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
    @settings(max_examples=150, deadline=None)
    def test_round_trip_bound_within_range(self, bounds, bits, seed):
        lo, hi = bounds
        p = compute_params(CalibRange(lo, hi), bits)
        x = np.random.default_rng(seed).uniform(lo, hi, 256).astype(np.float32)
        err = np.abs(fake_quantize(x, p).astype(np.float64) - x)
        assert err.max() <= p.scale / 2 + 1e-6

    @given(zero_ranges, st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_monotonicity(self, bounds, bits, seed):
        lo, hi = bounds
        p = compute_params(CalibRange(lo, hi), bits)
        x = np.sort(np.random.default_rng(seed).uniform(2 * lo, 2 * hi, 128)).astype(np.float32)
        codes = quantize(x, p).payload.astype(np.int64)
        assert (np.diff(codes) >= 0).all()

    @given(zero_ranges, st.sampled_from([2, 4, 8]))
    @settings(max_examples=100, deadline=None)
    def test_saturation_collapses_out_of_range(self, bounds, bits):
        lo, hi = bounds
        p = compute_params(CalibRange(lo, hi), bits)
        below = np.array([lo - 1e3, lo - 1.0], dtype=np.float32)
        above = np.array([hi + 1.0, hi + 1e3], dtype=np.float32)
        cb = quantize(below, p).payload
        ca = quantize(above, p).payload
        assert cb[0] == cb[1] == -(2 ** (bits - 1))
        assert ca[0] == ca[1] == 2 ** (bits - 1) - 1

    @given(zero_ranges, st.sampled_from([2, 4, 8]))
    @settings(max_examples=100, deadline=None)
    def test_zero_point_correctness(self, bounds, bits):
        lo, hi = bounds
        p = compute_params(CalibRange(lo, hi), bits)
        recon = fake_quantize(np.zeros(1, dtype=np.float32), p)
        assert abs(float(recon[0])) <= p.scale / 2

    def test_one_sided_range_saturates_instead_of_bounding(self):
        # documents the clamped-zero-point behavior: for 0 outside [a, c]
        # part of the range is unreachable and the s/2 bound does not hold
        p = compute_params(CalibRange(1.0, 2.0), 8)
        x = np.array([2.0], dtype=np.float32)
        err = abs(float(fake_quantize(x, p)[0]) - 2.0)
        assert err > p.scale / 2  # saturation at the clamped grid


class TestQuantizeModel:
    def make_model(self, seed=0):
        spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4, 6), head_units=5)
        return build_toy_model(spec, seed)

    def full_ranges(self, model, per_channel=False):
        weight_ranges = weight_minmax_ranges(model, per_channel=per_channel)
        act = {site: CalibRange(-4.0, 4.0) for site in activation_sites(model)}
        return weight_ranges, act

    def test_weight_round_trip_bound(self):
        model = self.make_model()
        weight_ranges, act = self.full_ranges(model)
        qm = quantize_model(model, weight_ranges, act, 8)
        for i, layer in enumerate(model.layers):
            key = f"layer{i}.weight"
            if key not in qm.weights:
                continue
            recon = dequantize(qm.weights[key])
            scale = qm.weights[key].params.scale
            assert np.abs(recon - layer.weight).max() <= scale / 2 + 1e-6

    def test_missing_ranges_listed(self):
        model = self.make_model()
        weight_ranges, act = self.full_ranges(model)
        del act["layer1"]
        first_weight = next(iter(weight_ranges))
        del weight_ranges[first_weight]
        with pytest.raises(MissingRangeError) as err:
            quantize_model(model, weight_ranges, act, 8)
        assert "layer1" in err.value.missing
        assert first_weight in err.value.missing

    def test_per_channel_mse_not_worse_than_per_tensor(self):
        # random weights with genuinely different per-channel spreads: the
        # per-tensor grid must serve the widest channel, per-channel adapts
        rng = np.random.default_rng(3)
        weight = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)
        weight *= (1.0 + np.arange(6, dtype=np.float32))[:, None, None, None]
        conv = Conv2d(weight, np.zeros(6, dtype=np.float32), padding=1)
        model = ModelGraph([conv], (4, 8, 8))
        act = {site: CalibRange(-4.0, 4.0) for site in activation_sites(model)}
        qm_t = quantize_model(model, weight_minmax_ranges(model), act, 8)
        qm_c = quantize_model(model, weight_minmax_ranges(model, per_channel=True), act, 8)
        mse_t = float(np.mean((dequantize(qm_t.weights["layer0.weight"]) - weight) ** 2))
        mse_c = float(np.mean((dequantize(qm_c.weights["layer0.weight"]) - weight) ** 2))
        assert mse_c <= mse_t

    def test_bn_parameters_stay_full_precision(self):
        model = self.make_model()
        weight_ranges, act = self.full_ranges(model)
        qm = quantize_model(model, weight_ranges, act, 8)
        for i in model.bn_indices:
            assert np.array_equal(
                qm._exec_graph.layers[i].running_mean, model.layers[i].running_mean
            )

    def test_passthrough_equals_full_precision_bitwise(self):
        model = self.make_model(seed=4)
        qm = QuantizedModel.passthrough(model)
        x = rand32((2, 3, 8, 8), seed=5)
        ref, _ = forward(model, x)
        out = forward_quantized(qm, x)
        assert np.array_equal(out, ref)

    def test_quantized_forward_reports_finite_mse(self):
        model = self.make_model(seed=6)
        weight_ranges, act = self.full_ranges(model)
        qm = quantize_model(model, weight_ranges, act, 8)
        x = rand32((4, 3, 8, 8), seed=7)
        ref, _ = forward(model, x)
        out = forward_quantized(qm, x)
        mse = float(np.mean((out - ref) ** 2))
        assert math.isfinite(mse)

    def test_one_layer_zero_input_follows_bias_path(self):
        # conv(bias b) on zero input -> fake-quantized everywhere: the output
        # equals fq(conv(fq(0))) traced by hand through the single layer
        bias = np.array([0.37, -0.11], dtype=np.float32)
        conv = Conv2d(rand32((2, 1, 3, 3), seed=8), bias, padding=1)
        model = ModelGraph([conv], (1, 4, 4))
        act = {
            "input": CalibRange(-1.0, 1.0),
            "layer0": CalibRange(-0.5, 0.5),
        }
        wr = weight_minmax_ranges(model)
        qm = quantize_model(model, wr, act, 8)
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        out = forward_quantized(qm, x)
        in_p = qm.activation_params["input"]
        out_p = qm.activation_params["layer0"]
        fq_zero = fake_quantize(x, in_p)
        hand = conv_like(qm, fq_zero)
        expected = fake_quantize(hand, out_p)
        np.testing.assert_array_equal(out, expected)

    def test_quantized_model_file_round_trip(self, tmp_path):
        model = self.make_model(seed=9)
        weight_ranges, act = self.full_ranges(model)
        qm = quantize_model(model, weight_ranges, act, 8)
        path = tmp_path / "m.q.zsq"
        save_quantized_model(qm, path)
        loaded = load_quantized_model(path)
        x = rand32((2, 3, 8, 8), seed=10)
        assert np.array_equal(forward_quantized(qm, x), forward_quantized(loaded, x))

    def test_quantize_twice_identical_files(self, tmp_path):
        model = self.make_model(seed=11)
        weight_ranges, act = self.full_ranges(model)
        p1, p2 = tmp_path / "a.q.zsq", tmp_path / "b.q.zsq"
        save_quantized_model(quantize_model(model, weight_ranges, act, 8), p1)
        save_quantized_model(quantize_model(model, weight_ranges, act, 8), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_size_reduction_on_reference_scale_model(self, tmp_path):
        spec = ToyModelSpec(input_shape=(3, 32, 32), channels=(16, 32, 64), head_units=32)
        model = build_toy_model(spec, 7)
        weight_ranges, act = self.full_ranges(model)
        fp_path, q_path = tmp_path / "m.zsq", tmp_path / "m.q.zsq"
        save_model(model, fp_path)
        save_quantized_model(quantize_model(model, weight_ranges, act, 8), q_path)
        ratio = q_path.stat().st_size / fp_path.stat().st_size
        assert 0.24 <= ratio <= 0.30

    def test_low_bit_pipeline_completes(self):
        model = self.make_model(seed=12)
        weight_ranges, act = self.full_ranges(model)
        qm = quantize_model(model, weight_ranges, act, 2)
        out = forward_quantized(qm, rand32((1, 3, 8, 8), seed=13))
        assert np.isfinite(out).all()


def conv_like(qm, x):
    """Forward of the first (and only) exec-graph layer, for hand traces."""
    return qm._exec_graph.layers[0].forward(x)
