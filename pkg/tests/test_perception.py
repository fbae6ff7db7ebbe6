import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardattn.config import ModelConfig, model_preset
from hardattn.perception import (
    GlimpseError, GlimpseGrid, Perception, extract_glimpse, new_episode, run_episode_step,
)
from hardattn.tensor import engine as E
from hardattn.tensor.engine import Tensor

SMALL = dict(feature_dim=16, hidden_dim=24, latent_dim=8, glimpse_channels=8, decoder_channels=8, n_s=1)


def small_perception(seed=0, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    return cfg, Perception(cfg, np.random.default_rng(seed))


def images(n=4, seed=0, size=32):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32)


class TestGlimpseGrid:
    def test_cifar_grid(self):
        grid = GlimpseGrid(32, 8, 4)
        assert grid.side == 7 and grid.num_cells == 49

    def test_tinyimagenet_grid(self):
        assert GlimpseGrid(64, 16, 8).side == 7

    def test_rejects_untiled(self):
        with pytest.raises(GlimpseError):
            GlimpseGrid(32, 8, 5)

    def test_glimpses_inside_image(self):
        grid = GlimpseGrid(32, 8, 4)
        r, c = grid.top_left(np.arange(grid.num_cells))
        assert r.min() == 0 and c.min() == 0
        assert (r + 8).max() == 32 and (c + 8).max() == 32

    def test_row_major(self):
        grid = GlimpseGrid(32, 8, 4)
        assert grid.top_left(8) == (4, 4)
        assert grid.top_left(6) == (0, 24)

    def test_normalized_locations_in_range(self):
        loc = GlimpseGrid(32, 8, 4).normalized_locations()
        assert loc.shape == (49, 2)
        assert loc.min() >= -1 and loc.max() <= 1
        np.testing.assert_allclose(loc[24], [0.0, 0.0])

    def test_extract_matches_slice(self):
        grid = GlimpseGrid(32, 8, 4)
        x = images(2)
        g = extract_glimpse(x[1], 17, grid)
        np.testing.assert_array_equal(g, x[1, :, 8:16, 12:20])

    def test_constant_image(self):
        x = np.full((1, 3, 32, 32), 0.25)
        assert (GlimpseGrid(32, 8, 4).extract(x, 30) == 0.25).all()

    def test_extract_all_matches_extract(self):
        grid = GlimpseGrid(32, 8, 4)
        x = images(3)
        allg = grid.extract_all(x)
        for l in (0, 13, 48):
            np.testing.assert_array_equal(allg[:, l], grid.extract(x, l))

    def test_out_of_grid_rejected(self):
        grid = GlimpseGrid(32, 8, 4)
        for bad in (-1, 49):
            with pytest.raises(GlimpseError):
                extract_glimpse(images(1)[0], bad, grid)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 48), min_size=1, max_size=7, unique=True))
    def test_coverage_bound(self, cells):
        grid = GlimpseGrid(32, 8, 4)
        area = grid.pixel_mask(cells).sum()
        assert area <= len(cells) * 64
        r, c = grid.top_left(np.array(cells))
        disjoint = all(abs(r[i] - r[j]) >= 8 or abs(c[i] - c[j]) >= 8
                       for i in range(len(cells)) for j in range(i))
        assert (area == len(cells) * 64) == disjoint


class TestEncoder:
    def test_feature_shape_and_extent(self):
        cfg, per = small_perception()
        assert cfg.n_g == 3
        with per.encoder.evaluating():
            fmap = per.encoder.glimpse_features(images(2)[:, :, :8, :8])
        assert fmap.shape == (2, cfg.feature_dim, 1, 1)

    def test_benchmark_feature_dim(self):
        assert model_preset("cifar10").feature_dim == 128
        assert model_preset("cifar10").hidden_dim == 512

    def test_additivity(self):
        _, per = small_perception()
        per.eval()
        grid = GlimpseGrid(32, 8, 4)
        x = images(2)
        locs = grid.normalized_locations().astype(np.float32)
        g1, g2 = grid.extract(x, 3), grid.extract(x, 40)
        la, lb = np.repeat(locs[[5]], 2, 0), np.repeat(locs[[31]], 2, 0)
        with E.no_grad():
            d1 = per.encoder(g1, la).data - per.encoder(g1, lb).data
            d2 = per.encoder(g2, la).data - per.encoder(g2, lb).data
            e1 = per.encoder(g1, la).data - per.encoder(g2, la).data
            fg = (per.encoder.glimpse_features(g1).data - per.encoder.glimpse_features(g2).data)
        np.testing.assert_allclose(d1, d2, atol=1e-5)
        np.testing.assert_allclose(e1, fg.reshape(2, -1), atol=1e-5)

    def test_glimpse_receptive_field(self):
        """n_g for a 16x16 glimpse also lands on a 1x1 map."""
        cfg = ModelConfig(**{**SMALL, "image_size": 64, "glimpse_size": 16, "stride": 8})
        per = Perception(cfg, np.random.default_rng(0)).eval()
        with E.no_grad():
            out = per.encoder.glimpse_features(np.zeros((1, 3, 16, 16), dtype=np.float32))
        assert out.shape[2:] == (1, 1)


class TestAggregatorAndClassifier:
    def test_layer_normalized(self):
        cfg, per = small_perception()
        per.eval()
        rng = np.random.default_rng(0)
        with E.no_grad():
            h = per.aggregator(rng.standard_normal((5, cfg.hidden_dim)).astype(np.float32),
                               rng.standard_normal((5, cfg.feature_dim)).astype(np.float32)).data
        np.testing.assert_allclose(h.mean(axis=1), 0.0, atol=1e-4)
        np.testing.assert_allclose(h.var(axis=1), 1.0, atol=1e-3)

    def test_deterministic(self):
        cfg, per = small_perception()
        per.eval()
        hf = (np.ones((2, cfg.hidden_dim), np.float32), np.ones((2, cfg.feature_dim), np.float32))
        with E.no_grad():
            np.testing.assert_array_equal(per.aggregator(*hf).data, per.aggregator(*hf).data)

    def test_map_form_matches_vector_form(self):
        cfg, per = small_perception()
        per.eval()
        rng = np.random.default_rng(1)
        h = rng.standard_normal((2, cfg.hidden_dim)).astype(np.float32)
        fmap = rng.standard_normal((2, cfg.feature_dim, 3, 3)).astype(np.float32)
        with E.no_grad():
            out = per.aggregator.forward_map(h, fmap).data
            one = per.aggregator(h, fmap[:, :, 1, 2]).data
        np.testing.assert_allclose(out[:, :, 1, 2], one, atol=1e-5)

    def test_probabilities_sum_to_one(self):
        cfg, per = small_perception()
        per.eval()
        with E.no_grad():
            p = per.classifier(np.random.default_rng(0).standard_normal((6, cfg.hidden_dim))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_eval_mode_repeatable(self):
        cfg, per = small_perception()
        per.eval()
        h = np.random.default_rng(0).standard_normal((6, cfg.hidden_dim))
        with E.no_grad():
            np.testing.assert_array_equal(per.classifier(h).data, per.classifier(h).data)

    def test_training_mode_uses_dropout(self):
        cfg, per = small_perception()
        per.train()
        per.classifier.drop.rng = np.random.default_rng(0)
        h = np.random.default_rng(0).standard_normal((6, cfg.hidden_dim))
        with E.no_grad():
            assert not np.array_equal(per.classifier(h).data, per.classifier(h).data)

    def test_zero_weight_classifier_uniform(self):
        cfg, per = small_perception()
        per.classifier.out.weight.data[...] = 0.0
        per.eval()
        with E.no_grad():
            p = per.classifier(np.ones((3, cfg.hidden_dim))).data
        np.testing.assert_allclose(p, 1.0 / cfg.num_classes, atol=1e-7)


class TestEpisode:
    def _run(self, locs, n=3):
        cfg, per = small_perception()
        per.eval()
        grid = GlimpseGrid.from_config(cfg)
        state = new_episode(n, cfg)
        x = images(n)
        with E.no_grad():
            for l in locs:
                run_episode_step(state, x, l, per, grid)
        return state

    def test_first_step(self):
        state = self._run([10])
        assert state.t == 0
        assert state.visited.sum(axis=1).tolist() == [1, 1, 1]

    def test_seven_distinct_cells(self):
        state = self._run([0, 8, 16, 24, 32, 40, 48])
        assert (state.visited.sum(axis=1) == 7).all()
        assert state.trace.shape == (3, 7)
        np.testing.assert_allclose(state.class_dists.sum(axis=2), 1.0, atol=1e-6)

    def test_revisit_rejected(self):
        with pytest.raises(GlimpseError):
            self._run([5, 9, 5])

    def test_per_image_locations(self):
        state = self._run([np.array([1, 2, 3]), np.array([4, 5, 6])])
        np.testing.assert_array_equal(state.trace, [[1, 4], [2, 5], [3, 6]])
        assert state.visited[0, [1, 4]].all() and state.visited.sum() == 6

    def test_hidden_state_starts_at_zero(self):
        cfg = ModelConfig(**SMALL)
        assert (new_episode(2, cfg).h.data == 0).all()

    def test_seven_glimpse_area_bound(self):
        grid = GlimpseGrid(32, 8, 4)
        rng = np.random.default_rng(0)
        for _ in range(200):
            cells = rng.choice(49, 7, replace=False)
            assert grid.pixel_mask(cells).mean() <= 0.4375
