import copy
import dataclasses

import numpy as np
import pytest

from hardattn.config import DatasetSpec, ModelConfig, PolicyConfig, RunConfig, TrainConfig, benchmark_train_config
from hardattn.data import generate_synthetic, normalize
from hardattn.model import HardAttentionModel, load_model
from hardattn.pvae import build_target_feature_map, masked_nll, synthesize
from hardattn.tensor import engine as E
from hardattn.tensor.engine import Tensor
from hardattn.tensor.optim import Adam, OptimConfig
from hardattn.training import (
    TrainingError, augment, ce_loss, flip_horizontal, phase1_batch, phase3_batch, phase_state,
    prepare_run_dir, random_locations, read_metrics, resume, total_loss, train_epoch, train_phase,
)

SMALL = dict(feature_dim=16, hidden_dim=24, latent_dim=8, glimpse_channels=8, decoder_channels=8, n_s=1)
FAST = dict(epochs1=1, epochs2=1, epochs3=1, batch_size=16, max_batches=2)


def small_model(seed=0):
    return HardAttentionModel(ModelConfig(**SMALL), seed)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(DatasetSpec(n_train=64, n_val=32, n_test=32, seed=3))


class TestLosses:
    def test_uniform(self):
        p = np.full((1, 10), 0.1)
        assert ce_loss(p, [3]).data[0] == pytest.approx(np.log(10), abs=1e-6)

    def test_certain(self):
        assert ce_loss(np.eye(3)[[1]], [1]).data[0] == pytest.approx(0.0, abs=1e-7)

    def test_half(self):
        assert ce_loss(np.array([[0.5, 0.5]]), [0]).data[0] == pytest.approx(np.log(2), abs=1e-6)

    def test_zero_probability_clamped(self):
        out = ce_loss(np.array([[1.0, 0.0]]), [1]).data[0]
        assert np.isfinite(out) and out == pytest.approx(-np.log(1e-12), rel=1e-5)

    @pytest.mark.parametrize("bad", [[-1], [3], [1.0]])
    def test_invalid_label(self, bad):
        with pytest.raises(TrainingError):
            ce_loss(np.full((1, 3), 1 / 3), np.array(bad))

    def test_total_matches_parts(self):
        rng = np.random.default_rng(0)
        pv = [rng.random(5) for _ in range(7)]
        ce = [rng.random(5) for _ in range(7)]
        with E.default_dtype(np.float64):
            out = total_loss(pv, ce, 0.25, 16.0).data
        ref = sum(0.25 * pv[t].mean() + 16.0 * ce[t].mean() for t in range(7)) / 7
        assert out == pytest.approx(ref, abs=1e-6)

    def test_total_reduces(self):
        pv, ce = [np.ones(2) * 3.0], [np.ones(2) * 5.0]
        assert total_loss(pv, ce, 0.0, 2.0).data == pytest.approx(10.0)
        assert total_loss(pv, ce, 0.5, 0.0).data == pytest.approx(1.5)

    def test_alpha_default(self):
        assert TrainConfig().alpha_for(256) * 256 == pytest.approx(1.0)

    def test_benchmark_betas(self):
        betas = [benchmark_train_config(d).beta for d in ("svhn", "cinic10", "cifar10", "cifar100", "tinyimagenet")]
        assert betas == [32, 16, 16, 8, 8]
        assert benchmark_train_config("cifar100").lr2 == 1e-4
        assert benchmark_train_config("cifar10").lr3 == 1e-3


class TestAugment:
    def test_disabled_is_normalization(self):
        x = np.array([0, 255, 127], dtype=np.uint8).reshape(1, 1, 1, 3)
        out = augment(x, np.random.default_rng(0), TrainConfig())
        np.testing.assert_allclose(out[0, 0, 0], [-1.0, 1.0, 127 / 127.5 - 1], atol=1e-7)

    def test_flip_involution(self):
        x = np.random.default_rng(0).random((2, 3, 4, 5))
        np.testing.assert_array_equal(flip_horizontal(flip_horizontal(x)), x)

    def test_bounds_with_everything(self):
        cfg = benchmark_train_config("cifar10")
        x = np.random.default_rng(1).integers(0, 256, (16, 3, 32, 32)).astype(np.uint8)
        out = augment(x, np.random.default_rng(2), cfg)
        assert out.shape == x.shape and out.dtype == np.float32
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert not np.allclose(out, normalize(x))

    def test_unit_scale_zero_shift_identity(self):
        from hardattn.training import _resample
        x = np.random.default_rng(3).random((2, 3, 8, 8))
        np.testing.assert_array_equal(_resample(x, np.ones(2), np.zeros((2, 2), int)), x)

    def test_random_locations_distinct(self):
        locs = random_locations(50, 7, 49, np.random.default_rng(0))
        assert locs.shape == (50, 7)
        assert all(len(set(r)) == 7 for r in locs.tolist())
        with pytest.raises(TrainingError):
            random_locations(1, 50, 49, np.random.default_rng(0))


class TestPhases:
    def test_phase_partition(self):
        model = small_model()
        disc = {id(p) for p in model.discriminative_parameters()}
        gen = {id(p) for p in model.generative_parameters()}
        assert not disc & gen
        assert disc | gen == {id(p) for p in model.parameters()}
        s1, s2, s3 = (phase_state(model, k) for k in (1, 2, 3))
        assert {id(p) for p in s1.active} == disc and s1.sampling == "random"
        assert {id(p) for p in s2.active} == gen and s2.sampling == "random"
        assert len(s3.active) == len(model.parameters()) and not s3.frozen and s3.sampling == "eig"

    @pytest.mark.parametrize("phase", [1, 2])
    def test_frozen_untouched(self, tiny_data, phase):
        model = small_model()
        object.__setattr__(model, "completed_phase", phase - 1)
        state = phase_state(model, phase)
        before = [p.data.copy() for p in state.frozen]
        active_before = [p.data.copy() for p in state.active]
        train_phase(model, tiny_data, TrainConfig(**FAST), phase)
        assert all(np.array_equal(p.data, b) for p, b in zip(state.frozen, before))
        assert any(not np.array_equal(p.data, b) for p, b in zip(state.active, active_before))

    def test_check_frozen_detects_change(self):
        model = small_model()
        state = phase_state(model, 1)
        state.snapshot()
        state.frozen[0].data += 1.0
        with pytest.raises(TrainingError):
            state.check_frozen()

    def test_phase_order_enforced(self, tiny_data):
        with pytest.raises(TrainingError):
            train_phase(small_model(), tiny_data, TrainConfig(**FAST), 2)

    def test_empty_split(self, tiny_data):
        empty = dataclasses.replace(tiny_data, train=tiny_data.train.subset(0))
        with pytest.raises(TrainingError):
            train_phase(small_model(), empty, TrainConfig(**FAST), 1)

    def test_actnorm_initialised_in_phase2(self, tiny_data):
        model = small_model()
        object.__setattr__(model, "completed_phase", 1)
        train_phase(model, tiny_data, TrainConfig(**FAST), 2)
        assert all(getattr(m, "initialized", True) for m in model.flows.layers)

    def test_reproducible_losses(self, tiny_data):
        def trajectory():
            model = small_model(1)
            cfg = TrainConfig(**{**FAST, "max_batches": 3})
            state = phase_state(model, 1)
            state.snapshot()
            opt = Adam(state.active, OptimConfig())
            return [train_epoch(model, opt, state, tiny_data.train, cfg, e) for e in range(2)]

        assert trajectory() == trajectory()

    def test_phase1_loss_decreases(self, tiny_data):
        model = small_model(2)
        cfg = TrainConfig(batch_size=16, epochs1=12, early_stop_patience=100)
        res = train_phase(model, tiny_data, cfg, 1)
        losses = [r["train_loss"] for r in res.history]
        assert np.mean(losses[-3:]) < np.mean(losses[:3])

    def test_phase2_reconstruction_improves(self, tiny_data):
        model = small_model(3)
        object.__setattr__(model, "completed_phase", 1)
        cfg = TrainConfig(batch_size=32, epochs2=6, early_stop_patience=100)
        res = train_phase(model, tiny_data, cfg, 2)
        losses = [r["val_loss"] for r in res.history]
        assert np.mean(losses[-2:]) < np.mean(losses[:2])

    def test_phase3_sequences_vary_with_z(self, tiny_data):
        model = small_model(4)
        for layer in model.flows.layers:
            for p in layer.parameters():
                p.data[...] = np.random.default_rng(0).standard_normal(p.shape) * 0.1
        model.flows.base_head.bias.data[:] = 0.0
        model.set_dropout_rng(np.random.default_rng(0))
        x, y = normalize(tiny_data.train.x[:8]), tiny_data.train.y[:8]
        cfg = TrainConfig()
        l0 = np.arange(8)
        traces = []
        for seed in (0, 1):
            with E.no_grad():
                phase3_batch(model, x, y, cfg, np.random.default_rng(seed), l0=l0, record=traces)
        np.testing.assert_array_equal(traces[0][:, 0], l0)
        assert not np.array_equal(traces[0], traces[1])
        assert cfg.train_P == 1 and PolicyConfig().P == 20


class TestOverfit:
    def test_one_image_full_mask(self, tiny_data):
        """Decoder and posterior can reproduce the target map of a single image."""
        model = small_model(5)
        x = normalize(tiny_data.train.x[:1])
        model.eval()
        target = build_target_feature_map(x, model.perception.encoder, model.grid)
        params = model.generative_parameters()
        opt = Adam(params, OptimConfig(learning_rate=1e-2))
        h = np.zeros((1, 24), np.float32)
        mask = np.ones((1, 7, 7))
        for step in range(400):
            opt.zero_grad()
            model.zero_grad()
            synth = synthesize(Tensor(h), model.flows, model.pvae.decoder, np.random.default_rng(step))
            loss = masked_nll(synth.f_tilde, target, mask, model.pvae.log_sigma_sq).sum()
            E.backward(loss)
            opt.step()
        with E.no_grad():
            synth = synthesize(Tensor(h), model.flows, model.pvae.decoder, np.random.default_rng(0))
        rel = np.linalg.norm(synth.f_tilde.data - target) / np.linalg.norm(target)
        assert rel < 0.1


class TestRunDir:
    def test_checkpoint_and_metrics(self, tiny_data, tmp_path):
        cfg = RunConfig(model=ModelConfig(**SMALL), train=TrainConfig(**FAST))
        run = prepare_run_dir("r", cfg, root=tmp_path)
        assert "train.batch_size = 16" in (run / "config.txt").read_text()
        model = small_model()
        res = train_phase(model, tiny_data, cfg.train, 1, run_dir=run)
        assert res.checkpoint == run / "phase1.npz"
        rows = read_metrics(run / "metrics.csv")
        assert rows[0]["phase"] == 1 and rows[0]["val_acc_per_t"].shape == (7,)
        loaded, meta = load_model(res.checkpoint)
        assert meta["phase"] == 1 and loaded.completed_phase == 1
        for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_resume_same_phase(self, tiny_data, tmp_path):
        cfg = TrainConfig(**FAST)
        model = small_model()
        res = train_phase(model, tiny_data, cfg, 1, run_dir=tmp_path)
        fresh = small_model(9)
        opt, meta = resume(fresh, res.checkpoint, 1, cfg)
        assert opt is not None and opt.state.step > 0
        opt2, _ = resume(small_model(9), res.checkpoint, 2, cfg)
        assert opt2 is None
