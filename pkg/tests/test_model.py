import dataclasses

import numpy as np
import pytest

from sefusion.layers import INFERENCE, TRAINING
from sefusion.model import (
    EFFICIENT_STANDIN,
    RESIDUAL_STANDIN,
    BackboneConfig,
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    FusionModelConfig,
    Stage,
    build_model,
    forward,
    load_checkpoint,
    predict,
    predict_proba,
    save_checkpoint,
    set_trainable_tail,
    threshold,
)
from sefusion.tensor import ShapeError, Tensor


class TestConfig:
    def test_stage_roundtrip(self):
        for text in ("16/3/2/bn", "16/3/1/bn/res", "8/1/1"):
            assert Stage.parse(text).format() == text

    def test_backbone_parse(self):
        assert BackboneConfig.parse("x", EFFICIENT_STANDIN.format()) == dataclasses.replace(EFFICIENT_STANDIN, name="x")

    def test_presets_align(self):
        assert EFFICIENT_STANDIN.output_hw(224, 224) == RESIDUAL_STANDIN.output_hw(224, 224) == (14, 14)
        FusionModelConfig(EFFICIENT_STANDIN, RESIDUAL_STANDIN).validate()

    def test_spatial_mismatch(self, tiny_cfg):
        cfg = dataclasses.replace(tiny_cfg, branch_b=BackboneConfig("b", (Stage(8, 3, 2),), 1))
        with pytest.raises(ShapeError):
            build_model(cfg)

    def test_se_ratio_must_divide(self, tiny_cfg):
        with pytest.raises(ValueError):
            build_model(dataclasses.replace(tiny_cfg, se_ratio=3))

    def test_tail_out_of_range(self):
        with pytest.raises(ValueError):
            BackboneConfig("a", (Stage(8, 3, 2),), 2)

    def test_fused_channels(self, tiny_cfg):
        assert tiny_cfg.fused_channels == tiny_cfg.branch_a.output_channels + tiny_cfg.branch_b.output_channels
        m = build_model(tiny_cfg)
        assert m.dense1.weights.shape[0] == tiny_cfg.fused_channels


class TestBuild:
    def test_topology(self):
        m = build_model(FusionModelConfig(EFFICIENT_STANDIN, RESIDUAL_STANDIN, input_size=(32, 32)))
        assert m.dense1.weights.shape == (64, 256)
        assert m.dense2.weights.shape == (256, 128)
        assert m.head.weights.shape == (128, 1)
        assert m.config.dense1_dropout == 0.2 and m.config.dense2_dropout == 0.1

    def test_seed_determinism(self, tiny_cfg):
        a, b = build_model(tiny_cfg).state_dict(), build_model(tiny_cfg).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        c = build_model(dataclasses.replace(tiny_cfg, seed=1)).state_dict()
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    def test_zero_tail_freezes_branches(self, tiny_cfg):
        cfg = dataclasses.replace(tiny_cfg, branch_a=tiny_cfg.branch_a.with_tail(0), branch_b=tiny_cfg.branch_b.with_tail(0))
        m = build_model(cfg)
        for name, _ in m.named_parameters():
            assert m.trainable[name] == (not name.startswith(("a.stage", "b.stage")))

    def test_tail_three(self):
        cfg = FusionModelConfig(EFFICIENT_STANDIN, RESIDUAL_STANDIN, input_size=(32, 32))
        m = build_model(cfg)
        assert [m.stage_trainable("a", i) for i in range(4)] == [False, True, True, True]
        assert [m.stage_trainable("b", i) for i in range(5)] == [False, False, True, True, True]

    def test_set_trainable_tail(self, tiny_cfg):
        m = build_model(tiny_cfg)
        set_trainable_tail(m, "a", 1)
        assert [m.stage_trainable("a", i) for i in range(3)] == [False, False, True]
        set_trainable_tail(m, "b", 0)
        assert not any(m.stage_trainable("b", i) for i in range(3))
        with pytest.raises(ValueError):
            set_trainable_tail(m, "a", 4)
        with pytest.raises(ValueError):
            set_trainable_tail(m, "c", 1)

    def test_parameter_count(self, tiny_cfg):
        m = build_model(tiny_cfg)
        total = sum(t.data.size for _, t in m.named_parameters())
        assert m.parameter_count() == total
        assert 0 < m.parameter_count(trainable_only=True) <= total


class TestForward:
    def test_range_and_cardinality(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        x = rng.uniform(size=(5, 3, 16, 16)).astype(np.float32)
        p = forward(m, x).data
        assert p.shape == (5,)
        assert np.all((p > 0) & (p < 1))

    def test_duplicate_samples_agree(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        x = rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)
        p = forward(m, np.concatenate([x, x, rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)])).data
        assert p[0] == p[1]

    def test_inference_deterministic(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        x = rng.uniform(size=(3, 3, 16, 16)).astype(np.float32)
        assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()

    def test_training_mode_runs(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        p = forward(m, rng.uniform(size=(4, 3, 16, 16)).astype(np.float32), TRAINING, np.random.default_rng(0))
        assert p.shape == (4,) and p.requires_grad

    def test_wrong_input_shape(self, tiny_cfg):
        with pytest.raises(ShapeError):
            forward(build_model(tiny_cfg), np.zeros((2, 3, 8, 8), np.float32))

    def test_threshold_rule(self):
        np.testing.assert_array_equal(threshold(np.array([0.5, 0.49, 0.51, 0.0, 1.0])), [1, 0, 1, 0, 1])

    def test_predict_matches_threshold(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        x = rng.uniform(size=(7, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(predict(m, x), (forward(m, x, INFERENCE).data >= 0.5).astype(int))

    def test_predict_proba_chunking(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        x = rng.uniform(size=(7, 3, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(predict_proba(m, x, batch_size=3), forward(m, x).data, rtol=1e-6)

    def test_full_path_gradient(self):
        from sefusion.gradcheck import _full_model

        assert _full_model(np.random.default_rng(0)) < 1e-3


class TestCheckpoint:
    def test_roundtrip_bytes_and_outputs(self, tiny_cfg, tmp_path, rng):
        m = build_model(tiny_cfg)
        # make running statistics non-trivial
        forward(m, rng.uniform(size=(4, 3, 16, 16)).astype(np.float32), TRAINING, np.random.default_rng(1))
        save_checkpoint(m, tmp_path / "a.sefn")
        loaded = load_checkpoint(tmp_path / "a.sefn", tiny_cfg)
        save_checkpoint(loaded, tmp_path / "b.sefn")
        assert (tmp_path / "a.sefn").read_bytes() == (tmp_path / "b.sefn").read_bytes()
        x = rng.uniform(size=(3, 3, 16, 16)).astype(np.float32)
        assert forward(m, x).data.tobytes() == forward(loaded, x).data.tobytes()

    def test_header_layout(self, tiny_cfg, tmp_path):
        m = build_model(tiny_cfg)
        save_checkpoint(m, tmp_path / "m.sefn")
        blob = (tmp_path / "m.sefn").read_bytes()
        assert blob[:4] == b"SEFN"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == len(list(m.named_tensors()))
        import zlib

        assert int.from_bytes(blob[-4:], "little") == zlib.crc32(blob[:-4])

    def test_wrong_dense_units_names_tensor(self, tiny_cfg, tmp_path):
        save_checkpoint(build_model(tiny_cfg), tmp_path / "m.sefn")
        with pytest.raises(CheckpointShapeError, match="dense1.weights"):
            load_checkpoint(tmp_path / "m.sefn", dataclasses.replace(tiny_cfg, dense1_units=64))

    def test_distinct_errors(self, tiny_cfg, tmp_path):
        save_checkpoint(build_model(tiny_cfg), tmp_path / "m.sefn")
        blob = (tmp_path / "m.sefn").read_bytes()
        cases = {
            CheckpointTruncatedError: blob[: len(blob) // 2],
            CheckpointVersionError: blob[:4] + (2).to_bytes(4, "little") + blob[8:],
            CheckpointCorruptError: blob[:-1] + bytes([blob[-1] ^ 0xFF]),
        }
        for err, data in cases.items():
            (tmp_path / "bad.sefn").write_bytes(data)
            with pytest.raises(err):
                load_checkpoint(tmp_path / "bad.sefn", tiny_cfg)
        (tmp_path / "bad.sefn").write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(CheckpointCorruptError, match="magic"):
            load_checkpoint(tmp_path / "bad.sefn", tiny_cfg)

    def test_float64_model_saves_float32(self, tiny_cfg, tmp_path):
        m = build_model(tiny_cfg, dtype=np.float64)
        save_checkpoint(m, tmp_path / "m.sefn")
        loaded = load_checkpoint(tmp_path / "m.sefn", tiny_cfg)
        assert loaded.head.weights.dtype == np.float32
        np.testing.assert_array_equal(loaded.head.weights.data, m.head.weights.data.astype(np.float32))


def test_tensor_input_accepted(tiny_cfg, rng):
    m = build_model(tiny_cfg)
    x = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    assert forward(m, Tensor(x)).data.tobytes() == forward(m, x).data.tobytes()
