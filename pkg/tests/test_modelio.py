import numpy as np
import pytest

from zsq.engine import BatchNorm2d, Conv2d, ModelGraph, batch_stats, forward
from zsq.errors import (
    BlobBoundsError,
    ChecksumMismatchError,
    ConfigError,
    DataError,
    FormatVersionError,
    ManifestError,
    ShapeMismatchError,
)
from zsq.modelio import (
    SyntheticDataset,
    ToyModelSpec,
    absorb_bn_stats,
    build_toy_model,
    export_batch_images,
    export_raw_tensor,
    load_model,
    replicate_channels,
    save_model,
    write_pgm,
)

from conftest import rand32


def small_model(seed=0):
    spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4, 6), head_units=5)
    return build_toy_model(spec, seed)


class TestSaveLoad:
    def test_round_trip_is_bit_exact_on_forward(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.zsq"
        save_model(model, path)
        loaded = load_model(path)
        x = rand32((2, 3, 8, 8), seed=1)
        a, _ = forward(model, x)
        b, _ = forward(loaded, x)
        assert np.array_equal(a, b)

    def test_save_twice_identical_bytes(self, tmp_path):
        model = small_model()
        p1, p2 = tmp_path / "a.zsq", tmp_path / "b.zsq"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_blob_fails_with_bounds_error(self, tmp_path):
        path = tmp_path / "m.zsq"
        save_model(small_model(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises((BlobBoundsError, ChecksumMismatchError)):
            load_model(path)

    def test_flipped_byte_fails_checksum(self, tmp_path):
        path = tmp_path / "m.zsq"
        save_model(small_model(), path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF  # inside the weight blob
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_model(path)

    def test_version_mismatch_is_distinct_error(self, tmp_path):
        import json

        path = tmp_path / "m.zsq"
        save_model(small_model(), path)
        raw = path.read_bytes()
        hlen = int.from_bytes(raw[8:12], "little")
        manifest = json.loads(raw[12 : 12 + hlen])
        manifest["format_version"] = 99
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(raw[:8] + len(header).to_bytes(4, "little") + header + raw[12 + hlen :])
        with pytest.raises(FormatVersionError):
            load_model(path)

    def test_malformed_manifest_is_distinct_error(self, tmp_path):
        path = tmp_path / "m.zsq"
        save_model(small_model(), path)
        raw = path.read_bytes()
        hlen = int.from_bytes(raw[8:12], "little")
        garbage = b"{not json" + b" " * (hlen - 9)
        path.write_bytes(raw[:12] + garbage + raw[12 + hlen :])
        with pytest.raises(ManifestError):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.zsq"
        path.write_bytes(b"NOTAMODL" + b"\x00" * 32)
        with pytest.raises(ManifestError):
            load_model(path)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_model(tmp_path / "nope.zsq")


class TestBuildToyModel:
    def test_same_seed_identical_bytes(self, tmp_path):
        spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4, 6), head_units=5)
        p1, p2 = tmp_path / "a.zsq", tmp_path / "b.zsq"
        save_model(build_toy_model(spec, 7), p1)
        save_model(build_toy_model(spec, 7), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_different_weights(self):
        spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4,))
        a = build_toy_model(spec, 1)
        b = build_toy_model(spec, 2)
        assert not np.array_equal(a.layers[0].weight, b.layers[0].weight)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError):
            ToyModelSpec(input_shape=(3, 8, 8), channels=())

    def test_shape_propagation_matches_hand_arithmetic(self):
        # 3x32x32 -> conv(same) 8 -> pool2 -> 16 -> pool2 -> 32 -> pool2 = (32,4,4)
        spec = ToyModelSpec(input_shape=(3, 32, 32), channels=(8, 16, 32))
        model = build_toy_model(spec, 0)
        assert model.output_shape == (32, 4, 4)

    def test_bn_layers_start_at_identity_stats(self):
        model = build_toy_model(ToyModelSpec(input_shape=(3, 8, 8), channels=(4,)), 0)
        bn = model.layers[model.bn_indices[0]]
        np.testing.assert_array_equal(bn.running_mean, np.zeros(4))
        np.testing.assert_array_equal(bn.running_std, np.ones(4))

    def test_infeasible_pooling_rejected(self):
        spec = ToyModelSpec(input_shape=(3, 4, 4), channels=(4, 4, 4, 4))
        with pytest.raises(ConfigError):
            build_toy_model(spec, 0)


class TestSyntheticDataset:
    def test_same_seed_bit_identical(self):
        a = SyntheticDataset(kind="mixed", seed=5, count=12, channels=3, size=8)
        b = SyntheticDataset(kind="mixed", seed=5, count=12, channels=3, size=8)
        assert np.array_equal(a.batch(0, 12), b.batch(0, 12))

    def test_different_seed_differs(self):
        a = SyntheticDataset(kind="gaussian", seed=1, count=4, channels=3, size=8)
        b = SyntheticDataset(kind="gaussian", seed=2, count=4, channels=3, size=8)
        assert not np.array_equal(a.batch(0, 4), b.batch(0, 4))

    @pytest.mark.parametrize("kind", ["gaussian", "gradients", "blobs", "mixed"])
    def test_kinds_produce_finite_images(self, kind):
        data = SyntheticDataset(kind=kind, seed=3, count=6, channels=3, size=10)
        batch = data.batch(0, 6)
        assert batch.shape == (6, 3, 10, 10)
        assert batch.dtype == np.float32
        assert np.isfinite(batch).all()

    def test_channel_statistics_track_configured_means(self):
        data = SyntheticDataset(
            kind="gaussian", seed=4, count=64, channels=3, size=16,
            means=(2.0, -1.0, 0.5), scales=(1.0, 0.5, 2.0),
        )
        batch = data.batch(0, 64)
        got = batch.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(got, [2.0, -1.0, 0.5], atol=0.1)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticDataset(kind="fractal", seed=0, count=1, channels=3, size=8)

    def test_batches_are_consecutive_slices(self):
        data = SyntheticDataset(kind="gaussian", seed=6, count=20, channels=1, size=4)
        batches = list(data.batches(8))
        assert len(batches) == 2  # remainder of 4 dropped
        assert np.array_equal(batches[1], data.batch(8, 8))

    def test_out_of_range_batch_rejected(self):
        data = SyntheticDataset(kind="gaussian", seed=6, count=4, channels=1, size=4)
        with pytest.raises(DataError):
            data.batch(0, 5)


class TestReplicateChannels:
    def test_three_identical_channels(self):
        x = rand32((2, 1, 4, 4), seed=20)
        out = replicate_channels(x)
        assert out.shape == (2, 3, 4, 4)
        for c in range(3):
            assert np.array_equal(out[:, c], x[:, 0])

    def test_channel_mean_preserved(self):
        x = rand32((2, 1, 4, 4), seed=21)
        out = replicate_channels(x)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), x.mean(), rtol=1e-6)

    def test_batch_stats_per_channel_equal_source(self):
        x = rand32((2, 1, 4, 4), seed=22)
        mean_r, std_r = batch_stats(replicate_channels(x))
        mean_s, std_s = batch_stats(x)
        np.testing.assert_allclose(mean_r, np.repeat(mean_s, 3), rtol=1e-12)
        np.testing.assert_allclose(std_r, np.repeat(std_s, 3), rtol=1e-12)

    def test_multi_channel_input_rejected(self):
        with pytest.raises(ShapeMismatchError):
            replicate_channels(rand32((2, 3, 4, 4)))


def identity_conv_bn_model(channels=2, size=4):
    w = np.eye(channels, dtype=np.float32).reshape(channels, channels, 1, 1)
    layers = [
        Conv2d(w, np.zeros(channels)),
        BatchNorm2d(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels)),
    ]
    return ModelGraph(layers, (channels, size, size))


class TestAbsorbBnStats:
    def test_constant_data_momentum_one(self):
        model = identity_conv_bn_model(channels=1)

        class ConstData(SyntheticDataset):
            def image(self, i):
                return np.full((1, 4, 4), 2.5, dtype=np.float32)

        data = ConstData(kind="gaussian", seed=0, count=8, channels=1, size=4)
        absorbed = absorb_bn_stats(model, data, momentum=1.0, batch_size=8)
        bn = absorbed.layers[1]
        np.testing.assert_allclose(bn.running_mean, 2.5, atol=1e-6)
        assert float(bn.running_std[0]) == pytest.approx(np.sqrt(1e-8), rel=1e-3)

    def test_gaussian_data_converges_to_sample_moments(self):
        # enough batches that the EMA forgets the mu=0, sigma=1 prior
        model = identity_conv_bn_model(channels=1, size=8)
        data = SyntheticDataset(
            kind="gaussian", seed=9, count=512, channels=1, size=8,
            means=(2.0,), scales=(3.0,),
        )
        absorbed = absorb_bn_stats(model, data, momentum=0.1, batch_size=8)
        bn = absorbed.layers[1]
        assert float(bn.running_mean[0]) == pytest.approx(2.0, abs=0.1)
        assert float(bn.running_std[0]) == pytest.approx(3.0, abs=0.15)

    def test_deterministic(self):
        model = identity_conv_bn_model(channels=1)
        data = SyntheticDataset(kind="mixed", seed=3, count=16, channels=1, size=4)
        a = absorb_bn_stats(model, data, momentum=0.2)
        b = absorb_bn_stats(model, data, momentum=0.2)
        for i in a.bn_indices:
            assert np.array_equal(a.layers[i].running_mean, b.layers[i].running_mean)
            assert np.array_equal(a.layers[i].running_std, b.layers[i].running_std)

    def test_weights_untouched_and_std_positive(self):
        spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4, 6))
        model = build_toy_model(spec, 11)
        data = SyntheticDataset(kind="mixed", seed=12, count=32, channels=3, size=8)
        absorbed = absorb_bn_stats(model, data)
        for orig, new in zip(model.layers, absorbed.layers):
            if isinstance(orig, Conv2d):
                assert np.array_equal(orig.weight, new.weight)
        for i in absorbed.bn_indices:
            assert (absorbed.layers[i].running_std > 0).all()

    def test_empty_dataset_rejected(self):
        model = identity_conv_bn_model()
        data = SyntheticDataset(kind="gaussian", seed=0, count=0, channels=1, size=4)
        with pytest.raises(DataError):
            absorb_bn_stats(model, data)

    def test_single_channel_data_replicated_for_three_channel_model(self):
        spec = ToyModelSpec(input_shape=(3, 8, 8), channels=(4,))
        model = build_toy_model(spec, 13)
        data = SyntheticDataset(kind="gaussian", seed=14, count=16, channels=1, size=8)
        absorbed = absorb_bn_stats(model, data)
        assert (absorbed.layers[absorbed.bn_indices[0]].running_std > 0).all()

    def test_incompatible_channels_rejected(self):
        model = identity_conv_bn_model(channels=2)
        data = SyntheticDataset(kind="gaussian", seed=0, count=8, channels=3, size=4)
        with pytest.raises(ShapeMismatchError):
            absorb_bn_stats(model, data)


class TestImageExport:
    def test_pgm_header_and_dimensions(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_pgm(path, rand32((6, 9), seed=30))
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n9 6\n255\n")
        assert len(raw) == len(b"P5\n9 6\n255\n") + 6 * 9

    def test_constant_image_is_uniform_gray(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(path, np.full((4, 4), 7.0))
        body = path.read_bytes().split(b"\n255\n", 1)[1]
        assert set(body) == {128}

    def test_batch_export_file_counts(self, tmp_path):
        import os

        batch = rand32((8, 3, 5, 5), seed=31)
        written = [os.path.basename(p) for p in export_batch_images(batch, tmp_path)]
        grays = [p for p in written if p.endswith("_gray.pgm")]
        per_channel = [p for p in written if "_c" in p]
        assert len(grays) == 8
        assert len(per_channel) == 24

    def test_raw_export_round_trips(self, tmp_path):
        t = rand32((2, 3, 4, 4), seed=32)
        path = tmp_path / "t.bin"
        export_raw_tensor(path, t)
        back = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(t.shape)
        assert np.array_equal(back, t)
