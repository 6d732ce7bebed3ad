import hashlib
import json
import struct

import numpy as np
import pytest

from rtdprompt import model as M
from rtdprompt.model import (ContainerError, ModelConfig, WeightContainer,
                             discriminator_forward, generator_forward,
                             load_weights, save_weights)


class TestModelConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            ModelConfig(2, 30, 4, 64, 100, 64, 30)

    def test_sizes_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(0, 32, 2, 64, 100, 64, 32)

    def test_config_array_round_trip(self, toy_disc_cfg):
        assert ModelConfig.from_array(toy_disc_cfg.to_array()) == toy_disc_cfg


class TestContainerFormat:
    def test_round_trip_identity(self, toy_disc, tmp_path):
        path = tmp_path / "w.rtdw"
        save_weights(toy_disc, path)
        loaded = load_weights(path)
        assert loaded.config == toy_disc.config
        assert set(loaded.tensors) == set(toy_disc.tensors)
        for name, arr in toy_disc.tensors.items():
            assert np.array_equal(loaded.tensors[name], arr)

    def test_two_saves_byte_identical(self, toy_disc, tmp_path):
        p1, p2 = tmp_path / "a.rtdw", tmp_path / "b.rtdw"
        save_weights(toy_disc, p1)
        save_weights(toy_disc, p2)
        assert hashlib.sha256(p1.read_bytes()).digest() == \
            hashlib.sha256(p2.read_bytes()).digest()

    def test_missing_tensor_named(self, toy_disc_cfg):
        tensors = M.zero_params(toy_disc_cfg)
        del tensors["head.out.w"]
        with pytest.raises(ContainerError, match="head.out.w"):
            WeightContainer(toy_disc_cfg, tensors)

    def test_shape_mismatch_rejected(self, toy_disc_cfg):
        tensors = M.zero_params(toy_disc_cfg)
        tensors["head.out.b"] = np.zeros(2, dtype=np.float32)
        with pytest.raises(ContainerError, match="head.out.b"):
            WeightContainer(toy_disc_cfg, tensors)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rtdw"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="magic"):
            load_weights(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "bad.rtdw"
        path.write_bytes(M.MAGIC + struct.pack("<I", 99) + struct.pack("<Q", 2) + b"[]")
        with pytest.raises(ContainerError, match="version"):
            load_weights(path)

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "empty.rtdw"
        path.write_bytes(M.MAGIC + struct.pack("<I", 1) + struct.pack("<Q", 2) + b"[]")
        with pytest.raises(ContainerError, match="model_config"):
            load_weights(path)

    def test_truncated_payload(self, toy_disc, tmp_path):
        path = tmp_path / "w.rtdw"
        save_weights(toy_disc, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(ContainerError, match="bounds|truncated"):
            load_weights(path)

    def test_overlapping_offsets(self, tmp_path):
        manifest = [
            {"name": "model_config", "dtype": "f32", "shape": [9], "offset": 0},
            {"name": "x", "dtype": "f32", "shape": [4], "offset": 16},
        ]
        blob = json.dumps(manifest).encode()
        payload = np.zeros(9 + 4, dtype="<f4").tobytes()
        path = tmp_path / "w.rtdw"
        path.write_bytes(M.MAGIC + struct.pack("<I", 1) +
                         struct.pack("<Q", len(blob)) + blob + payload)
        with pytest.raises(ContainerError, match="overlap"):
            load_weights(path)


class TestDiscriminatorForward:
    def test_all_zero_weights_give_half(self, toy_disc_cfg):
        wc = WeightContainer(toy_disc_cfg, M.zero_params(toy_disc_cfg))
        out = discriminator_forward([2, 5, 6, 3], [0] * 4, wc)
        assert np.array_equal(out.p_replaced, [0.5] * 4)

    def test_output_length_matches_input(self, toy_disc):
        out = discriminator_forward([2, 5, 6, 7, 8, 9, 3], [0] * 7, toy_disc)
        assert out.p_replaced.shape == (7,)

    def test_probabilities_in_unit_interval(self, toy_disc):
        out = discriminator_forward([2, 5, 6, 3], [0] * 4, toy_disc)
        assert ((out.p_replaced >= 0) & (out.p_replaced <= 1)).all()

    def test_deterministic(self, toy_disc):
        a = discriminator_forward([2, 5, 6, 3], [0] * 4, toy_disc)
        b = discriminator_forward([2, 5, 6, 3], [0] * 4, toy_disc)
        assert np.array_equal(a.p_replaced, b.p_replaced)

    def test_id_out_of_range(self, toy_disc):
        with pytest.raises(ValueError, match="out of range"):
            discriminator_forward([2, 999, 3], [0] * 3, toy_disc)

    def test_length_overflow(self, toy_disc):
        n = toy_disc.config.max_positions + 1
        with pytest.raises(ValueError, match="max_positions"):
            discriminator_forward([2] * n, [0] * n, toy_disc)

    def test_pad_tail_does_not_change_real_outputs(self, toy_disc):
        pad = toy_disc.config.pad_id
        ids = [2, 5, 6, 7, 3]
        base = discriminator_forward(ids, [0] * 5, toy_disc)
        padded = discriminator_forward(ids + [pad, pad], [0] * 7, toy_disc)
        assert np.allclose(base.p_replaced, padded.p_replaced[:5], atol=1e-7)


class TestGeneratorForward:
    def test_zero_weights_uniform(self, toy_gen):
        cfg = toy_gen.config
        wc = WeightContainer(cfg, M.zero_params(cfg))
        dist = generator_forward([2, 5, 4, 3], [0] * 4, wc, [2])
        assert np.allclose(dist, 1.0 / cfg.vocab_size)

    def test_rows_normalized(self, toy_gen):
        dist = generator_forward([2, 5, 4, 6, 3], [0] * 5, toy_gen, [1, 2, 3])
        assert dist.shape == (3, toy_gen.config.vocab_size)
        assert np.allclose(dist.sum(axis=1), 1.0, atol=1e-6)

    def test_position_out_of_range(self, toy_gen):
        with pytest.raises(ValueError, match="position"):
            generator_forward([2, 5, 3], [0] * 3, toy_gen, [3])

    def test_argmax_matches_brute_force_logits(self, toy_gen):
        ids = np.array([2, 5, 4, 6, 3])
        seg = np.zeros(5, dtype=int)
        dist = generator_forward(ids, seg, toy_gen, [2])
        # brute force: raw numpy re-computation of the tied-embedding logits
        h = M.encoder_hidden(ids[None, :], seg[None, :],
                             toy_gen.params(), toy_gen.config).data[0]
        params = toy_gen.tensors
        z = h @ params["head.dense.w"] + params["head.dense.b"]
        t = np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3))
        z = 0.5 * z * (1 + t)
        mu, var = z.mean(-1, keepdims=True), z.var(-1, keepdims=True)
        z = params["head.ln.gain"] * (z - mu) / np.sqrt(var + 1e-12) + params["head.ln.bias"]
        logits = z @ params["embeddings.word"].T + params["head.out_bias"]
        assert int(dist[0].argmax()) == int(logits[2].argmax())

    def test_wrong_role_rejected(self, toy_disc):
        with pytest.raises(ValueError, match="head"):
            generator_forward([2, 3], [0, 0], toy_disc, [1])
