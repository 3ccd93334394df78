import numpy as np
import pytest
import torch

from semiuformer.core import (Checkpoint, CheckpointError, ConfigMismatchError,
                              LossWeights, NetConfig, load_checkpoint, load_run_config,
                              save_checkpoint, seeded_rng, split_seed)


def make_ckpt(tensors, role="teacher", config=None):
    return Checkpoint(version=1, role=role, tensors=tensors,
                      config=config or NetConfig(), rng_state=b"rng-bytes")


class TestConfig:
    def test_lambda_defaults_match_published_values(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.lambda6) == \
            (1.0, 1e-2, 2.0, 1e-2, 1e-5, 1e-6)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda3=-1.0)

    def test_netconfig_defaults(self):
        cfg = NetConfig()
        assert cfg.embed_dims == (16, 32, 64, 32, 16)
        assert cfg.depths == (1, 1, 2, 1, 1)
        assert cfg.num_heads == (1, 2, 4, 2, 1)
        assert cfg.kl_tap_stage == 2
        assert cfg.window_size == 4

    def test_netconfig_validation(self):
        with pytest.raises(ValueError):
            NetConfig(embed_dims=(16, 32, 64, 32))
        with pytest.raises(ValueError):
            NetConfig(embed_dims=(15, 32, 64, 32, 16), num_heads=(2, 2, 4, 2, 1))
        with pytest.raises(ValueError):
            NetConfig(kl_tap_stage=5)

    def test_run_config_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "embed_dims=8,16,32,16,8\ndepths=1,1,1,1,1\nwindow_size=4\n"
            "num_heads=1,2,4,2,1\nmlp_ratio=2.0\nkl_tap_stage=2\n"
            "lambda3=3.5\nlr=0.0002\nbatch_size=4\nepochs_teacher=10\n"
            "epochs_student=5\nseed=7\n")
        run = load_run_config(path)
        assert run.net.embed_dims == (8, 16, 32, 16, 8)
        assert run.weights.lambda3 == 3.5
        assert run.weights.lambda1 == 1.0
        assert run.lr == 2e-4
        assert run.batch_size == 4
        assert run.seed == 7


class TestRng:
    def test_same_seed_same_draws(self):
        a = torch.rand(100, generator=seeded_rng(0))
        b = torch.rand(100, generator=seeded_rng(0))
        assert torch.equal(a, b)

    def test_different_seed_different_draws(self):
        a = torch.rand(100, generator=seeded_rng(0))
        b = torch.rand(100, generator=seeded_rng(1))
        assert not torch.equal(a, b)

    def test_split_seed_stable_and_distinct(self):
        assert split_seed(42, 0) == split_seed(42, 0)
        assert split_seed(42, 0) != split_seed(42, 1)
        assert split_seed(42, 0) != split_seed(43, 0)


class TestCheckpoint:
    def test_round_trip_zeros(self, tmp_path):
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt({"w": np.zeros((2, 2), np.float32)}), path)
        loaded = load_checkpoint(path)
        assert loaded.role == "teacher"
        assert np.array_equal(loaded.tensors["w"], np.zeros((2, 2), np.float32))

    def test_round_trip_bit_exact_large(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"big": rng.standard_normal(10**6).astype(np.float32).reshape(100, 100, 100)}
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt(tensors), path)
        loaded = load_checkpoint(path)
        assert np.abs(loaded.tensors["big"] - tensors["big"]).max() == 0.0
        assert loaded.rng_state == b"rng-bytes"

    def test_tampered_payload_rejected(self, tmp_path):
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt({"w": np.ones((4, 4), np.float32)}), path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF  # flip a byte inside the last tensor payload
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt({"w": np.ones((8, 8), np.float32)}), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt({"w": np.ones(3, np.float32)}), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        small = NetConfig(embed_dims=(8, 16, 32, 16, 8), num_heads=(1, 2, 4, 2, 1))
        path = tmp_path / "c.sufc"
        save_checkpoint(make_ckpt({"w": np.ones(3, np.float32)}, config=small), path)
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, expected_config=NetConfig())

    def test_roles_preserved(self, tmp_path):
        for role in ("teacher", "student", "discriminator"):
            path = tmp_path / f"{role}.sufc"
            save_checkpoint(make_ckpt({"w": np.ones(2, np.float32)}, role=role), path)
            assert load_checkpoint(path).role == role

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.sufc"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
