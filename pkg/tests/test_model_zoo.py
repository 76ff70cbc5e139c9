import struct
from dataclasses import replace

import numpy as np
import pytest

from apnea_cnn import model_zoo as mz
from apnea_cnn import tensor_nn as nn

SMALL = mz.ArchitectureConfig(
    conv_blocks=(mz.ConvBlock(2, 9, stride=2), mz.ConvBlock(3, 5)),
    input_len=64,
    name="small",
)


def conv_subtotal(config):
    return sum(
        b.filters * (s.in_shape[0] * b.kernel_len + (1 if config.use_bias else 0))
        for b, s in zip(config.conv_blocks, [p for p in mz.layer_plan(config) if p.kind == "conv"])
    )


class TestLayerPlan:
    def test_m1_feature_lengths(self):
        lengths = [s.out_shape[-1] for s in mz.layer_plan(mz.M1) if s.kind in ("conv", "pool")]
        assert lengths == [655, 327, 318, 159, 130, 65]

    def test_m1_flatten(self):
        flat = next(s for s in mz.layer_plan(mz.M1) if s.kind == "flatten")
        assert flat.out_shape == (1950,)

    def test_m4_flatten(self):
        flat = next(s for s in mz.layer_plan(mz.M4) if s.kind == "flatten")
        assert flat.out_shape == (7950,)

    def test_kernel_longer_than_input_names_layer(self):
        bad = replace(SMALL, conv_blocks=(mz.ConvBlock(2, 9), mz.ConvBlock(3, 40)))
        with pytest.raises(mz.ConfigError, match="conv1"):
            mz.layer_plan(bad)

    def test_patient_profile_needs_two_blocks(self):
        with pytest.raises(mz.ConfigError):
            mz.patient_profile(replace(SMALL, conv_blocks=SMALL.conv_blocks[:1]))

    def test_config_dict_round_trip(self):
        assert mz.ArchitectureConfig.from_dict(mz.M1.to_dict()) == mz.M1


class TestParameterCounts:
    def test_conv_subtotal(self):
        assert conv_subtotal(mz.M1) == 46_883

    @pytest.mark.parametrize("config, mode, expected", [
        (mz.M1, "dense", 50_909),
        (mz.M3, "binarized", 50_824),
        (mz.M4, "dense", 17_959),
    ])
    def test_profile_totals(self, config, mode, expected):
        model = mz.build_model(config, np.random.default_rng(0), mode)
        assert mz.count_params(model) == (expected, expected)
        assert mz.closed_form_param_count(config) == expected

    def test_bias_identity(self):
        m1 = mz.build_model(mz.M1, np.random.default_rng(0))
        m3 = mz.build_model(mz.M3, np.random.default_rng(0), "binarized")
        assert mz.bias_count(m1) == 85
        assert mz.count_params(m1)[0] - mz.count_params(m3)[0] == mz.bias_count(m1)

    @pytest.mark.parametrize("per_position", [False, True])
    def test_closed_form_matches_allocation(self, per_position):
        cfg = replace(SMALL, input_bn_per_position=per_position, dense_blocks=(mz.DenseBlock(7),))
        model = mz.build_model(cfg, np.random.default_rng(1))
        assert mz.count_params(model)[0] == mz.closed_form_param_count(cfg)

    def test_nonzero_drops_with_zeroed_weights(self):
        model = mz.build_model(SMALL, np.random.default_rng(0))
        total, _ = mz.count_params(model)
        model.params["conv0.kernel"][0] = 0.0
        assert mz.count_params(model) == (total, total - 9)


class TestForward:
    def test_probabilities_sum_to_one(self, rng):
        model = mz.build_model(SMALL, rng)
        probs = mz.predict_proba(model, rng.standard_normal((5, 64)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_single_window(self, rng):
        model = mz.build_model(SMALL, rng)
        x = rng.standard_normal(64)
        probs, label = mz.forward(model, x)
        np.testing.assert_array_equal(probs, mz.predict_proba(model, x[None])[0])
        assert label == int(probs[1] > probs[0])

    def test_wrong_window_length(self, rng):
        model = mz.build_model(SMALL, rng)
        with pytest.raises(nn.ShapeError):
            mz.forward(model, np.zeros(63))

    def test_single_window_train_mode_rejected(self, rng):
        model = mz.build_model(SMALL, rng)
        with pytest.raises(mz.ConfigError):
            mz.forward(model, np.zeros(64), mode="train", rng=rng)

    def test_infer_is_deterministic_and_batch_independent(self, rng):
        model = mz.build_model(SMALL, rng)
        x = rng.standard_normal((6, 64))
        whole = model.forward_batch(x)
        np.testing.assert_array_equal(whole, model.forward_batch(x))
        # BLAS may block a single row differently from a batch; agree to rounding
        np.testing.assert_allclose(whole[2:3], model.forward_batch(x[2:3]), rtol=1e-12, atol=1e-14)

    def test_ties_go_to_non_apnea(self):
        assert mz.predict_labels(np.array([[0.5, 0.5], [0.4, 0.6]])).tolist() == [0, 1]

    def test_binarized_needs_bias_free_config(self, rng):
        with pytest.raises(mz.ConfigError):
            mz.build_model(SMALL, rng, "binarized")

    def test_binarized_equals_dense_with_sign_weights(self, rng):
        cfg = mz.binarized_profile(SMALL)
        binary = mz.build_model(cfg, rng, "binarized")
        dense = mz.build_model(cfg, np.random.default_rng(99))
        for name in dense.params:
            dense.params[name] = binary.params[name].copy()
        for name in binary.weight_names():
            dense.params[name] = np.where(binary.latents[name] >= 0, 1.0, -1.0)
        x = rng.standard_normal((10, 64))
        assert np.array_equal(binary.forward_batch(x), dense.forward_batch(x))

    def test_full_model_gradient(self, rng):
        cfg = replace(SMALL, output_dropout=0.0)
        model = mz.build_model(cfg, rng)
        x = rng.standard_normal((4, 64))
        y = np.array([0, 1, 1, 0])

        def loss():
            return nn.softmax_cross_entropy(model.forward_batch(x, "train", rng), y)[0]

        loss()
        grads = model.backward(nn.softmax_cross_entropy(model.forward_batch(x, "train", rng), y)[2])
        w = model.params["conv1.kernel"]
        idx = (1, 0, 2)
        orig = w[idx]
        h = 1e-5
        w[idx] = orig + h
        up = loss()
        w[idx] = orig - h
        down = loss()
        w[idx] = orig
        np.testing.assert_allclose(grads["conv1.kernel"][idx], (up - down) / (2 * h), rtol=1e-4, atol=1e-9)

    def test_backward_needs_train_forward(self, rng):
        model = mz.build_model(SMALL, rng)
        model.forward_batch(np.zeros((2, 64)))
        with pytest.raises(nn.InvariantError):
            model.backward(np.zeros((2, 2)))


class TestSerialization:
    @pytest.fixture
    def model(self, rng):
        model = mz.build_model(SMALL, rng)
        model.buffers["head_bn.running_mean"] += 0.25
        model.metadata["note"] = "x"
        return model

    def test_round_trip(self, model, rng):
        back = mz.deserialize_model(mz.serialize_model(model))
        assert back.config == model.config and back.mode == model.mode
        assert back.metadata == model.metadata
        for group in ("params", "buffers"):
            a, b = getattr(model, group), getattr(back, group)
            assert a.keys() == b.keys()
            for k in a:
                assert np.array_equal(a[k], b[k])
        x = rng.standard_normal((3, 64))
        assert np.array_equal(back.forward_batch(x), model.forward_batch(x))

    def test_byte_identical(self, model):
        blob = mz.serialize_model(model)
        assert mz.serialize_model(mz.deserialize_model(blob)) == blob

    @pytest.mark.parametrize("mode, config", [("pruned", SMALL), ("binarized", mz.binarized_profile(SMALL))])
    def test_masks_and_latents_survive(self, mode, config, rng):
        model = mz.build_model(config, rng, mode)
        back = mz.deserialize_model(mz.serialize_model(model))
        assert back.masks.keys() == model.masks.keys()
        assert back.latents.keys() == model.latents.keys()

    def test_file_round_trip(self, model, tmp_path):
        mz.save_model(model, tmp_path / "m.bin")
        assert mz.serialize_model(mz.load_model(tmp_path / "m.bin")) == mz.serialize_model(model)

    def test_truncated(self, model):
        blob = mz.serialize_model(model)
        for cut in (5, 40, len(blob) - 1):
            with pytest.raises(mz.TruncatedFileError):
                mz.deserialize_model(blob[:cut])

    def test_checksum(self, model):
        blob = bytearray(mz.serialize_model(model))
        blob[len(blob) // 2] ^= 0x01
        with pytest.raises(mz.ChecksumError):
            mz.deserialize_model(bytes(blob))

    def test_version(self, model):
        blob = bytearray(mz.serialize_model(model))
        struct.pack_into("<I", blob, 8, 99)
        with pytest.raises(mz.VersionMismatchError):
            mz.deserialize_model(bytes(blob))

    def test_bad_magic(self, model):
        blob = b"NOTMODEL" + mz.serialize_model(model)[8:]
        with pytest.raises(mz.ModelFormatError):
            mz.deserialize_model(blob)
