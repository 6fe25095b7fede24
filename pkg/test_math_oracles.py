#!/usr/bin/env python3
"""
Oracle tests: the quadrature and Monte Carlo machinery itself, then the
verification suite end to end.
"""

import math
from collections import Counter

import numpy as np
import pytest

from math_oracles import (OracleResult, QuadratureError, SuiteSize, check_fixed_instance, log_integrate, mc_agrees,
                          mc_mean, paired_prior_by_quadrature, run_verification_suite)


class TestQuadrature:
    def test_standard_normal_integrates_to_one(self):
        log_f = lambda u: -0.5 * np.sum(u * u, axis=-1) - 0.5 * u.shape[-1] * math.log(2 * math.pi)
        assert log_integrate(log_f, [-12.0], [12.0]) == pytest.approx(0.0, abs=1e-11)
        assert log_integrate(log_f, [-12.0, -12.0], [12.0, 12.0]) == pytest.approx(0.0, abs=1e-10)

    def test_interval_length(self):
        assert log_integrate(lambda u: np.zeros(len(u)), [0.0], [3.0]) == pytest.approx(math.log(3.0))

    def test_unsettled_integral_raises(self):
        rough = lambda u: np.where(np.sin(1e4 * u[:, 0]) > 0, 0.0, -50.0)
        with pytest.raises(QuadratureError):
            log_integrate(rough, [0.0, 0.0], [1.0, 1.0], max_points=10_000)

    def test_paired_prior_unit_instance(self):
        assert paired_prior_by_quadrature(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-2.3871832,
                                                                                                  abs=1e-7)


class TestMonteCarlo:
    def test_mean_and_standard_error(self):
        mean, se = mc_mean(np.array([1.0, 2.0, 3.0, 4.0]))
        assert mean == 2.5
        assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)

    def test_agreement_on_known_mean(self, rng):
        z_score, passed = mc_agrees(0.0, lambda r: r.standard_normal(20_000), rng)
        assert passed, z_score

    def test_disagreement_is_reported(self, rng):
        _, passed = mc_agrees(1.0, lambda r: r.standard_normal(20_000), rng)
        assert not passed

    def test_a_miss_is_final(self, rng):
        draws = iter([np.tile([0.9, 1.1], 50), np.tile([-0.1, 0.1], 50)])
        calls = []

        def draw(r):
            calls.append(1)
            return next(draws)

        z_score, passed = mc_agrees(0.0, draw, rng)
        assert not passed
        assert len(calls) == 1
        assert z_score > 3.0


class TestSuite:
    def test_fixed_instance_check(self):
        error, passed = check_fixed_instance()
        assert passed and error < 1e-9

    def test_result_row(self):
        row = OracleResult("term3_decomposition", 7, 1e-14, 1e-10, True).as_row()
        assert row == {"identity": "term3_decomposition", "instance_seed": 7, "error": 1e-14,
                       "tolerance": 1e-10, "passed": True}

    def test_quick_suite_passes(self):
        results = run_verification_suite(seed=7, size=SuiteSize.quick())
        failed = [(r.identity, r.instance_seed, r.error) for r in results if not r.passed]
        assert not failed
        identities = {r.identity for r in results}
        assert {"paired_prior_quadrature_d1", "paired_prior_quadrature_d2", "term3_decomposition",
                "raven_kl_mc", "raven_kl_fixed_instance", "kl_constant_offset",
                "bound_gradient"} <= identities

    def test_suite_is_reproducible(self):
        size = SuiteSize(quadrature_instances=1, gmm_instances=1, term3_instances=5, matrix_instances=2,
                         mc_instances=1, mc_samples=2_000, offset_draws=5)
        a = [r.as_row() for r in run_verification_suite(3, size)]
        b = [r.as_row() for r in run_verification_suite(3, size)]
        assert a == b

    def test_mixture_grid_matches_the_single_prior_grid(self):
        assert SuiteSize().gmm_instances == SuiteSize().quadrature_instances == 100

    def test_mixture_grid_covers_every_component_count(self):
        size = SuiteSize(quadrature_instances=1, gmm_instances=3, term3_instances=5, matrix_instances=2,
                         mc_instances=1, mc_samples=2_000, offset_draws=5)
        counts = Counter(r.identity for r in run_verification_suite(3, size))
        for components in (1, 2, 3):
            for d in (1, 2):
                assert counts[f"gmm_paired_prior_quadrature_c{components}_d{d}"] == 3

    @pytest.mark.slow
    def test_full_suite_passes(self):
        results = run_verification_suite(seed=0)
        assert all(r.passed for r in results)
