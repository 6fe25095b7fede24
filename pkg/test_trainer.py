#!/usr/bin/env python3
"""Trainer tests: augmentation pairs, regimes, determinism, divergence and resume"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

import trainer as trainer_module
from trainer import (METRICS_COLUMNS, AugmentationSpec, BatchPrefetcher, RavenTrainer, TrainConfig,
                     TrainingDivergedError, epoch_batches, make_pair, train)
from vae_model import VaeModel


def small_config(**changes):
    base = dict(regime="raven", epochs=2, batch_size=16, learning_rate=0.01, seed=11, hidden_dims=(6,),
                latent_dim=2, sigma_aug=[0.1], augmentation=AugmentationSpec(noise_std=0.05))
    base.update(changes)
    return TrainConfig(**base)


class TestMakePair:
    def test_noise_statistics(self, rng):
        x = np.full((4000, 5), 0.5)
        clean, noisy = make_pair(x, AugmentationSpec(noise_std=0.2), rng)
        np.testing.assert_array_equal(clean, x)
        diff = noisy - clean
        assert abs(diff.mean()) < 0.01
        assert diff.std() == pytest.approx(0.2, rel=0.02)

    def test_zero_noise_copies(self, rng):
        x = np.random.default_rng(0).random((3, 4))
        clean, noisy = make_pair(x, AugmentationSpec(noise_std=0.0), rng)
        np.testing.assert_array_equal(clean, noisy)
        assert noisy is not clean

    def test_rejects_flat_input(self, rng):
        with pytest.raises(ValueError):
            make_pair(np.zeros(4), AugmentationSpec(), rng)


class TestBatches:
    def test_paired_regime_yields_pairs(self, blobs):
        batches = list(epoch_batches(blobs.images, "raven", AugmentationSpec(), 16, np.random.default_rng(0)))
        assert sum(len(x) for x, _ in batches) == len(blobs)
        assert all(xp is not None and xp.shape == x.shape for x, xp in batches)

    def test_noise_vae_doubles_the_data(self, blobs):
        batches = list(epoch_batches(blobs.images, "noise_vae", AugmentationSpec(), 16, np.random.default_rng(0)))
        assert sum(len(x) for x, _ in batches) == 2 * len(blobs)
        assert all(xp is None for _, xp in batches)

    def test_vanilla_is_a_permutation(self, blobs):
        batches = list(epoch_batches(blobs.images, "vanilla", AugmentationSpec(), 7, np.random.default_rng(0)))
        stacked = np.vstack([x for x, _ in batches])
        np.testing.assert_array_equal(np.sort(stacked, axis=0), np.sort(blobs.images, axis=0))

    def test_prefetcher_preserves_order(self):
        items = [(np.full((1, 1), i), None) for i in range(10)]
        prefetcher = BatchPrefetcher(iter(items), depth=2)
        try:
            seen = [int(x[0, 0]) for x, _ in prefetcher]
        finally:
            prefetcher.close()
        assert seen == list(range(10))

    def test_prefetcher_surfaces_errors(self):
        def broken():
            yield np.zeros((1, 1)), None
            raise RuntimeError("reader failed")

        prefetcher = BatchPrefetcher(broken())
        try:
            with pytest.raises(RuntimeError, match="reader failed"):
                list(prefetcher)
        finally:
            prefetcher.close()


class TestTrainConfig:
    def test_gmm_regime_needs_components(self):
        with pytest.raises(ValidationError):
            TrainConfig(regime="raven_gmm", gmm_components=0)

    def test_sigma_length_must_match_latent(self):
        with pytest.raises(ValidationError):
            TrainConfig(latent_dim=3, sigma_aug=[0.1, 0.2])
        assert TrainConfig(latent_dim=3, sigma_aug=[0.1, 0.2, 0.3]).sigma_aug_variances() == pytest.approx(
            [0.01, 0.04, 0.09])

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValidationError):
            TrainConfig(sigma_aug=[0.0])

    def test_isotropic_sigma_is_broadcast(self):
        cfg = TrainConfig(latent_dim=4, sigma_aug=[0.5])
        assert cfg.sigma_aug_variances() == pytest.approx([0.25] * 4)

    def test_unknown_likelihood(self):
        with pytest.raises(ValidationError):
            TrainConfig(recon_likelihood="poisson")


class TestTraining:
    @pytest.mark.parametrize("regime", ["vanilla", "noise_vae", "raven"])
    def test_smoke(self, regime, blobs, tmp_path):
        result = train(small_config(regime=regime), blobs, tmp_path, run_hash="abc")
        assert result.epochs_completed == 2
        assert result.steps == len(result.metrics) > 0
        assert list(result.metrics.columns) == METRICS_COLUMNS
        assert np.isfinite(result.metrics["loss"]).all()
        assert (result.metrics["run_hash"] == "abc").all()
        assert (result.checkpoint / "manifest.json").exists()
        assert len(result.checkpoints) == 2
        written = pd.read_csv(result.metrics_path)
        assert len(written) == result.steps
        assert len(pd.read_csv(result.timings_path)) == result.steps

    def test_noise_vae_takes_twice_the_steps(self, blobs, tmp_path):
        vanilla = train(small_config(regime="vanilla", epochs=1), blobs, tmp_path / "a")
        noisy = train(small_config(regime="noise_vae", epochs=1), blobs, tmp_path / "b")
        assert vanilla.steps == 4
        assert noisy.steps == 8

    def test_gmm_regime_learns_a_prior(self, blobs, tmp_path):
        result = train(small_config(regime="raven_gmm", gmm_components=2), blobs, tmp_path)
        assert result.gmm is not None and result.gmm.components == 2
        assert result.gmm.weights.sum() == pytest.approx(1.0)
        assert np.isfinite(result.metrics["total"]).all()
        _, extra, _ = VaeModel.load(result.checkpoint)
        assert {"gmm.logits", "gmm.means", "gmm.log_vars"} <= set(extra)

    def test_loss_decreases(self, blobs, tmp_path):
        result = train(small_config(regime="vanilla", epochs=40, batch_size=60), blobs, tmp_path)
        losses = result.metrics["loss"].to_numpy()
        assert losses[-5:].mean() < losses[:5].mean()

    def test_raven_pulls_pairs_together(self, blobs, tmp_path):
        result = train(small_config(epochs=15), blobs, tmp_path)
        by_epoch = result.metrics.groupby("epoch")[["latent_gap", "total"]].mean()
        first, last = by_epoch.iloc[0], by_epoch.iloc[-1]
        assert last["latent_gap"] < first["latent_gap"]
        assert last["total"] > first["total"]

    @pytest.mark.parametrize("regime", ["vanilla", "raven"])
    def test_single_latent_with_a_batch_of_one(self, regime, blobs, tmp_path):
        result = train(small_config(regime=regime, latent_dim=1, batch_size=len(blobs) - 1, epochs=1), blobs,
                       tmp_path)
        assert result.steps == 2
        assert np.isfinite(result.metrics["total"]).all()
        assert result.model.encode(blobs.images[:1]).mean.shape == (1, 1)

    def test_same_config_same_metrics(self, blobs, tmp_path):
        first = train(small_config(), blobs, tmp_path / "one", run_hash="h")
        second = train(small_config(), blobs, tmp_path / "two", run_hash="h")
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()
        assert first.model.fingerprint() == second.model.fingerprint()

    def test_seed_changes_the_run(self, blobs, tmp_path):
        first = train(small_config(seed=1), blobs, tmp_path / "one")
        second = train(small_config(seed=2), blobs, tmp_path / "two")
        assert first.model.fingerprint() != second.model.fingerprint()

    def test_max_steps_stops_early(self, blobs, tmp_path):
        result = train(small_config(epochs=5, max_steps=3), blobs, tmp_path)
        assert result.steps == 3
        assert result.epochs_completed == 1

    def test_get_model_info(self, blobs, tmp_path):
        trainer = RavenTrainer(small_config(), blobs.dim, tmp_path)
        info = trainer.get_model_info()
        assert info["regime"] == "raven"
        assert info["steps"] == 0
        assert info["gmm_components"] == 0


class TestDivergence:
    def test_non_finite_gradient_aborts(self, blobs, tmp_path, monkeypatch):
        calls = {"n": 0}
        real_norm = trainer_module._global_norm

        def failing_norm(grads):
            calls["n"] += 1
            return float("nan") if calls["n"] == 5 else real_norm(grads)

        monkeypatch.setattr(trainer_module, "_global_norm", failing_norm)
        with pytest.raises(TrainingDivergedError) as info:
            train(small_config(), blobs, tmp_path)
        assert info.value.step == 5
        assert info.value.checkpoint == tmp_path / "checkpoints" / "epoch_001"
        assert (info.value.checkpoint / "manifest.json").exists()
        assert len(pd.read_csv(tmp_path / "metrics.csv")) == 4

    def test_divergence_before_first_checkpoint(self, blobs, tmp_path, monkeypatch):
        monkeypatch.setattr(trainer_module, "_global_norm", lambda grads: float("inf"))
        with pytest.raises(TrainingDivergedError) as info:
            train(small_config(), blobs, tmp_path)
        assert info.value.checkpoint is None

    def test_large_gradients_are_clipped(self, blobs, tmp_path):
        result = train(small_config(clip_norm=1e-6, epochs=1), blobs, tmp_path)
        assert (result.metrics["clipped"] == 1).all()


class TestResume:
    def test_resume_matches_uninterrupted_run(self, blobs, tmp_path):
        full = train(small_config(), blobs, tmp_path / "full")

        train(small_config(epochs=1), blobs, tmp_path / "split")
        resumed = train(small_config(), blobs, tmp_path / "split",
                        resume=tmp_path / "split" / "checkpoints" / "epoch_001")

        assert resumed.steps == full.steps
        assert resumed.model.fingerprint() == full.model.fingerprint()
        np.testing.assert_allclose(resumed.metrics["total"].to_numpy(dtype=float),
                                   full.metrics["total"].to_numpy(dtype=float), rtol=1e-12)

    def test_resume_rejects_other_architecture(self, blobs, tmp_path):
        first = train(small_config(epochs=1), blobs, tmp_path / "a")
        with pytest.raises(trainer_module.RavenError):
            train(small_config(hidden_dims=(5,)), blobs, tmp_path / "b", resume=first.checkpoint)
