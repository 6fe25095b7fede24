#!/usr/bin/env python3
"""Robustness tests: PGD attacks, linear probe and evaluation metrics"""

import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from dataset_io import Dataset
from robustness import (DEFAULT_DELTA_GRID, PGD_STEP_DIVISOR, AdversarialRow, AttackConfig, EvalReport, LinearProbe,
                        attack_batch, evaluate, extract_representations, fit_linear_probe, latent_pair_distances,
                        pgd_attack, reconstruction_mse, write_latents)
from vae_model import VaeArchitecture, VaeModel

W = np.array([1.0, -2.0, 0.5, 3.0])


@pytest.fixture
def linear_encoder():
    """mu(x) = w.x with unit posterior variance"""
    arch = VaeArchitecture(input_dim=4, hidden_dims=(), latent_dim=1)
    base = VaeModel.initialize(arch, seed=0)
    return base.with_params({"enc.mean.weight": W[:, None], "enc.mean.bias": np.zeros(1),
                             "enc.logvar.weight": np.zeros((4, 1)), "enc.logvar.bias": np.zeros(1)})


@pytest.fixture
def line_clusters(rng):
    """Three classes whose w.x values sit 2 apart, well inside the pixel range"""
    labels = np.repeat([0, 1, 2], 30)
    offsets = np.array([-2.0, 0.0, 2.0])[labels]
    images = 0.5 + offsets[:, None] * W / (W @ W) + 0.01 * rng.standard_normal((90, 4))
    return Dataset(images, labels, name="line", split="test")


def inversions(accuracies):
    return [b - a for a, b in zip(accuracies, accuracies[1:]) if b > a]


class TestAttackConfig:
    def test_default_step_is_a_fraction_of_the_budget(self):
        assert AttackConfig(budget=0.1).step_size == pytest.approx(0.004)
        assert AttackConfig(budget=0.1, step=0.02).step_size == 0.02

    def test_non_positive_step_rejected(self):
        with pytest.raises(ValidationError):
            AttackConfig(budget=0.1, step=0.0)

    def test_negative_budget_rejected(self):
        with pytest.raises(ValidationError):
            AttackConfig(budget=-0.1)


class TestPgd:
    def test_zero_budget_is_a_no_op(self, toy_model, rng):
        result = pgd_attack(toy_model, rng.random(8), AttackConfig(budget=0.0))
        np.testing.assert_array_equal(result.epsilon, np.zeros(8))
        assert result.objective == 0.0
        assert not result.failed

    @pytest.mark.parametrize("objective", ["kl", "w2"])
    def test_linear_encoder_reaches_the_corner(self, linear_encoder, objective):
        delta = 0.1
        result = pgd_attack(linear_encoder, np.full(4, 0.5), AttackConfig(budget=delta, objective=objective))
        corner = delta * np.sign(W)
        assert np.allclose(result.epsilon, corner) or np.allclose(result.epsilon, -corner)
        shift = float(W @ result.epsilon)
        expected = 0.5 * shift ** 2 if objective == "kl" else shift ** 2
        assert result.objective == pytest.approx(expected)

    @pytest.mark.parametrize("random_start", [False, True])
    def test_budget_always_holds(self, toy_model, rng, random_start):
        for delta in (0.01, 0.1, 0.3):
            cfg = AttackConfig(budget=delta, iterations=10, random_start=random_start, seed=4)
            result = pgd_attack(toy_model, rng.random(8), cfg)
            assert np.max(np.abs(result.epsilon)) <= delta + 1e-12

    def test_best_iterate_is_returned(self, toy_model, rng):
        result = pgd_attack(toy_model, rng.random(8), AttackConfig(budget=0.2, iterations=15))
        assert result.objective == pytest.approx(max(result.history))
        assert result.objective >= result.history[0]
        assert len(result.history) == 16

    def test_seeded_and_reproducible(self, toy_model, rng):
        x = rng.random(8)
        cfg = AttackConfig(budget=0.1, iterations=10, random_start=True, seed=9)
        np.testing.assert_array_equal(pgd_attack(toy_model, x, cfg).epsilon, pgd_attack(toy_model, x, cfg).epsilon)

    def test_batch_attacks_every_row(self, toy_model, blobs):
        results = attack_batch(toy_model, blobs.images[:5], AttackConfig(budget=0.05, iterations=3))
        assert len(results) == 5
        assert all(r.epsilon.shape == (8,) for r in results)

    @pytest.mark.parametrize("objective", ["kl", "w2"])
    def test_objective_climbs_before_the_box_binds(self, toy_model, blobs, objective):
        unsaturated = int(PGD_STEP_DIVISOR)
        results = attack_batch(toy_model, blobs.images, AttackConfig(budget=0.1, objective=objective))
        climbing = [bool(np.all(np.diff(r.history[:unsaturated + 1]) > 0)) for r in results]
        assert np.mean(climbing) >= 0.9

    def test_single_latent_model(self, blobs):
        model = VaeModel.initialize(VaeArchitecture(input_dim=8, hidden_dims=(6,), latent_dim=1), seed=3)
        for objective in ("kl", "w2"):
            result = pgd_attack(model, blobs.images[0], AttackConfig(budget=0.1, iterations=5, objective=objective))
            assert not result.failed, result.reason
            assert len(result.history) == 6
            assert result.objective > 0.0


class TestProbe:
    def test_separable_representations(self, rng):
        labels = np.repeat([0, 1, 2], 30)
        z = np.eye(3)[labels] * 5.0 + 0.1 * rng.standard_normal((90, 3))
        probe = fit_linear_probe(z, labels)
        assert not probe.degenerate
        assert probe.accuracy(z, labels) == 1.0

    def test_single_class_is_degenerate(self, rng):
        probe = fit_linear_probe(rng.standard_normal((10, 2)), np.full(10, 3))
        assert probe.degenerate
        np.testing.assert_array_equal(probe.predict(np.zeros((4, 2))), [3, 3, 3, 3])
        assert probe.accuracy(np.zeros((2, 2)), np.array([3, 1])) == 0.5

    def test_empty_labels(self):
        assert LinearProbe(None, True).accuracy(np.zeros((0, 2)), np.zeros(0)) == 0.0

    def test_random_representations_sit_at_chance(self, rng):
        classes, n = 4, 5000
        probe = fit_linear_probe(rng.standard_normal((n, 2)), rng.integers(0, classes, n))
        held_out = probe.accuracy(rng.standard_normal((n, 2)), rng.integers(0, classes, n))
        assert held_out == pytest.approx(1.0 / classes, abs=0.05)


class TestMetrics:
    def test_representations_are_encoder_means(self, toy_model, blobs):
        z = extract_representations(toy_model, blobs)
        assert z.shape == (len(blobs), 2)
        np.testing.assert_allclose(z, toy_model.encode(blobs.images).mean.numpy())

    def test_reconstruction_mse(self, toy_model, blobs):
        expected = np.mean(np.sum((blobs.images - toy_model.reconstruct(blobs.images)) ** 2, axis=1))
        assert reconstruction_mse(toy_model, blobs.images) == pytest.approx(expected)

    def test_zero_noise_distance(self, toy_model, blobs):
        np.testing.assert_array_equal(latent_pair_distances(toy_model, blobs.images, noise_std=0.0),
                                      np.zeros(len(blobs)))

    def test_distance_uses_the_seeded_draw(self, toy_model, blobs):
        noisy = blobs.images + 0.1 * np.random.default_rng(7).standard_normal(blobs.images.shape)
        diff = extract_representations(toy_model, noisy) - extract_representations(toy_model, blobs)
        np.testing.assert_allclose(latent_pair_distances(toy_model, blobs.images, 0.1, seed=7),
                                   np.sum(diff ** 2, axis=1))


class TestEvaluate:
    def test_report(self, toy_model, blobs):
        z = extract_representations(toy_model, blobs)
        probe = fit_linear_probe(z, blobs.labels)
        report = evaluate(toy_model, probe, blobs, delta_grid=(0.0, 0.05), objectives=("kl", "w2"),
                          attack=AttackConfig(iterations=3), regime="raven", run_hash="r1")
        assert report.n_test == len(blobs)
        assert [(r.objective, r.delta) for r in report.adversarial] == [
            ("kl", 0.0), ("kl", 0.05), ("w2", 0.0), ("w2", 0.05)]
        assert report.adversarial[0].accuracy == report.clean_accuracy
        assert set(report.per_class_accuracy) == {"0", "1", "2"}
        assert report.recon_mse == pytest.approx(reconstruction_mse(toy_model, blobs.images))
        assert report.latent_pair_distance_mean > 0

    @pytest.mark.parametrize("objective", ["kl", "w2"])
    def test_accuracy_does_not_rise_with_the_budget(self, linear_encoder, line_clusters, objective):
        z = extract_representations(linear_encoder, line_clusters)
        probe = fit_linear_probe(z, line_clusters.labels)
        assert probe.accuracy(z, line_clusters.labels) == 1.0

        report = evaluate(linear_encoder, probe, line_clusters, delta_grid=DEFAULT_DELTA_GRID,
                          objectives=(objective,), attack=AttackConfig())
        accuracies = [row.accuracy for row in report.adversarial]
        rises = inversions(accuracies)
        assert len(rises) <= 1 and all(r <= 0.005 for r in rises), accuracies
        assert accuracies[-1] < accuracies[0]

    def test_write(self, tmp_path):
        report = EvalReport(regime="vanilla", run_hash="abc", n_test=10, clean_accuracy=0.9,
                            adversarial=[AdversarialRow(objective="kl", delta=0.0, accuracy=0.9, samples=10),
                                         AdversarialRow(objective="kl", delta=0.1, accuracy=0.4, samples=10,
                                                        failures=1)],
                            recon_mse=3.5, latent_pair_distance_mean=0.2, latent_pair_distance_std=0.1)
        paths = report.write(tmp_path)
        frame = pd.read_csv(paths["csv"])
        assert list(frame.columns) == ["delta", "objective", "accuracy", "failures", "samples", "regime",
                                       "run_hash"]
        assert frame["accuracy"].tolist() == [0.9, 0.4]
        assert (frame["regime"] == "vanilla").all()
        with open(paths["json"]) as f:
            payload = json.load(f)
        assert payload["clean_accuracy"] == 0.9
        assert len(payload["adversarial"]) == 2

    def test_accuracy_out_of_range(self):
        with pytest.raises(ValidationError):
            AdversarialRow(objective="kl", delta=0.1, accuracy=1.5)

    def test_write_latents(self, tmp_path):
        path = write_latents(tmp_path / "z.csv", np.arange(6.0).reshape(3, 2), np.array([0, 1, 0]))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["z0", "z1", "label"]
        assert frame["label"].tolist() == [0, 1, 0]
