"""Synthetic dataset: planted-informativeness guarantees and determinism."""

import numpy as np
import pytest

from dynsparse.data import DatasetSpec, generate, nearest_pattern_accuracy


class TestGeneration:
    def test_shapes_and_fixed_informative_count(self):
        spec = DatasetSpec(train_size=32, eval_size=16, seed=3)
        ds = generate(spec)
        assert ds.train_x.shape == (32, 8, 8, 16)
        assert ds.eval_maps.shape == (16, 8, 8)
        counts = ds.train_maps.reshape(32, -1).sum(axis=1)
        assert np.all(counts == spec.n_informative)

    def test_bayes_accuracy_from_informative_positions(self):
        ds = generate(DatasetSpec(train_size=32, eval_size=256, seed=0))
        assert nearest_pattern_accuracy(ds, use_informative=True) > 0.95

    def test_uninformative_positions_are_chance(self):
        spec = DatasetSpec(train_size=32, eval_size=512, seed=0)
        ds = generate(spec)
        acc = nearest_pattern_accuracy(ds, use_informative=False)
        chance = 1.0 / spec.num_classes
        assert abs(acc - chance) < 0.08

    def test_deterministic_by_seed(self):
        a = generate(DatasetSpec(train_size=8, eval_size=8, seed=42))
        b = generate(DatasetSpec(train_size=8, eval_size=8, seed=42))
        assert np.array_equal(a.train_x, b.train_x)
        assert np.array_equal(a.eval_y, b.eval_y)
        c = generate(DatasetSpec(train_size=8, eval_size=8, seed=43))
        assert not np.array_equal(a.train_x, c.train_x)

    def test_flat_views_match(self):
        ds = generate(DatasetSpec(train_size=4, eval_size=4, seed=1))
        assert np.array_equal(
            ds.tokens("train").reshape(4, 8, 8, 16), ds.train_x
        )
        assert np.array_equal(ds.maps_flat("eval").reshape(4, 8, 8), ds.eval_maps)


class TestPlacements:
    def test_center_mode_avoids_border(self):
        ds = generate(DatasetSpec(train_size=64, eval_size=64, placement="center", seed=5))
        maps = np.concatenate([ds.train_maps, ds.eval_maps])
        border = np.zeros((8, 8), dtype=bool)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        assert not np.any(maps & border)
        center_freq = maps[:, 3:5, 3:5].mean()
        border_freq = maps[:, border].mean()
        assert center_freq > 0.9 and border_freq == 0.0

    def test_scatter_mode_spreads(self):
        ds = generate(DatasetSpec(train_size=128, eval_size=16, placement="scatter", seed=5))
        freq = ds.train_maps.mean(axis=0)
        # every cell is informative sometimes, none always
        assert freq.min() > 0.05 and freq.max() < 0.6

    def test_block_mode_contiguous(self):
        ds = generate(DatasetSpec(train_size=16, eval_size=4, placement="block", seed=2))
        for m in ds.train_maps:
            rows = np.flatnonzero(m.any(axis=1))
            cols = np.flatnonzero(m.any(axis=0))
            assert rows.max() - rows.min() <= 4 and cols.max() - cols.min() <= 4

    def test_unknown_placement_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(placement="diagonal")
