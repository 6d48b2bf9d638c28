"""Checkpoint container: byte-exact round trips and corruption detection."""

import numpy as np
import pytest

from dynsparse.checkpoint import CheckpointError, load, save
from dynsparse.layers import load_arrays, named_arrays
from dynsparse.presets import vit_config
from dynsparse.tensor import Tensor
from dynsparse.vit import VitModel


def sample_arrays(rng):
    return {
        "weights.a": rng.standard_normal((3, 4)).astype(np.float32),
        "weights.b": rng.standard_normal(7).astype(np.float64),
        "head.w": rng.standard_normal((2, 2, 2)).astype(np.float32),
    }


class TestRoundTrip:
    def test_byte_exact_double_save(self, tmp_path, rng):
        arrays = sample_arrays(rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save(p1, arrays)
        loaded = load(p1)
        save(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_dtypes_order_preserved(self, tmp_path, rng):
        arrays = sample_arrays(rng)
        path = tmp_path / "x.ckpt"
        save(path, arrays)
        loaded = load(path)
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            assert np.array_equal(loaded[name], arrays[name])

    def test_model_reload_identical_outputs(self, tmp_path, rng):
        cfg = vit_config("tiny-d6")
        model = VitModel.create(cfg, np.random.default_rng(0), stages=3, dtype=np.float32)
        x = Tensor(rng.standard_normal((2, cfg.n_patches, cfg.token_dim)).astype(np.float32))
        logits_before, _ = model.forward_dense(x)
        path = tmp_path / "model.ckpt"
        save(path, named_arrays({"weights": model.weights, "predictors": model.predictors}))

        fresh = VitModel.create(cfg, np.random.default_rng(99), stages=3, dtype=np.float32)
        load_arrays({"weights": fresh.weights, "predictors": fresh.predictors}, load(path))
        logits_after, _ = fresh.forward_dense(x)
        # bit-for-bit: same weights, same kernels
        assert np.array_equal(logits_before.data, logits_after.data)


class TestCorruption:
    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        save(path, sample_arrays(rng))
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(CheckpointError, match="truncated payload"):
            load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="magic"):
            load(path)

    def test_trailing_garbage(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        save(path, sample_arrays(rng))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load(path)

    def test_missing_tensor_on_load_into_model(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        save(path, {"only.one": np.zeros(3, dtype=np.float32)})
        target = {"only": {"one": Tensor(np.zeros(3)), "two": Tensor(np.zeros(2))}}
        with pytest.raises(KeyError, match="only.two"):
            load_arrays(target, load(path))

    def test_shape_mismatch_on_load(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save(path, {"w": np.zeros((2, 3), dtype=np.float32)})
        with pytest.raises(ValueError, match="shape"):
            load_arrays({"w": Tensor(np.zeros((3, 2)))}, load(path))
