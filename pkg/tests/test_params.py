#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试参数模块：参数模型校验、先验、矩匹配、强度网格与 k_max
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from src.models import detection
from src.models.params import (
    AliceParams,
    BobParams,
    EveParams,
    IntensityGrid,
    PARAMETER_NAMES,
    Prior,
    PriorSet,
    SystemParams,
    build_intensity_grid,
    default_eve_priors,
    fully_bayesian_priors,
    gamma_rate_for_k,
    k_max,
    moment_match_beta,
    moment_match_gamma,
    perturb_params,
)
from src.utils.errors import ConfigurationError, DomainError

from tests.conftest import GYS_BOB, gys_system


class TestParameterModels:
    def test_scalar_detector_values_broadcast(self):
        bob = BobParams(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033)
        assert bob.efficiency == (0.045, 0.045)
        assert bob.afterpulse == (0.0, 0.0)

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            BobParams(efficiency=0.1, dark_count=0.0, misalignment=0.0, gain=2)

    def test_intensities_must_increase(self):
        with pytest.raises(ValidationError):
            AliceParams(intensities=(1.0, 0.5), attenuation=0.2, distance_ab=10)

    def test_eve_cannot_sit_beyond_bob(self):
        with pytest.raises(ValidationError):
            gys_system(eve=EveParams(distance_ae=60.0))

    def test_frozen(self):
        theta = gys_system()
        with pytest.raises(ValidationError):
            theta.alice.attenuation = 0.3

    def test_channel_efficiency_at_50km(self):
        assert gys_system().alice.channel_eff == pytest.approx(10 ** (-1.05), rel=1e-14)
        assert gys_system().alice.channel_eff == pytest.approx(0.0891, abs=1e-4)

    def test_flat_value_roundtrip(self):
        theta = gys_system(eve=EveParams(distance_ae=10, channel_eff=0.4, photons_per_pulse=2.5, intercept_fraction=0.3))
        updated = theta.with_values({"efficiency_1": 0.05, "photons_per_pulse": 4.0})
        assert updated.bob.efficiency == (0.045, 0.05)
        assert updated.value("photons_per_pulse") == 4.0
        assert set(theta.values()) == set(PARAMETER_NAMES)

    def test_unknown_flat_name(self):
        with pytest.raises(DomainError):
            gys_system().value("gain")

    def test_detector_split(self):
        bob = BobParams(afterpulse=0.1, **GYS_BOB).split(0.1)
        assert bob.efficiency == pytest.approx((0.045 * 0.9, 0.045 * 1.1))
        assert bob.afterpulse == pytest.approx((0.09, 0.11))
        assert bob.misalignment == 0.033


class TestMomentMatching:
    def test_gamma_examples(self):
        alpha, beta = moment_match_gamma(0.21, 0.042**2)
        assert alpha == pytest.approx(25.0)
        assert beta == pytest.approx(119.048, abs=1e-3)
        assert moment_match_gamma(1, 1) == pytest.approx((1, 1))
        assert moment_match_gamma(2, 1) == pytest.approx((4, 2))

    def test_beta_examples(self):
        assert moment_match_beta(0.5, 1 / 12) == pytest.approx((1, 1))
        alpha, beta = moment_match_beta(0.045, 0.0045**2)
        assert alpha / (alpha + beta) == pytest.approx(0.045, abs=1e-9)
        with pytest.raises(DomainError):
            moment_match_beta(0.5, 0.5)

    def test_moments_reproduced(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            mean = rng.uniform(0.01, 0.99)
            variance = rng.uniform(0.01, 0.9) * mean * (1 - mean)
            a, b = moment_match_beta(mean, variance)
            assert stats.beta.mean(a, b) == pytest.approx(mean, rel=1e-12)
            assert stats.beta.var(a, b) == pytest.approx(variance, rel=1e-10)
            gm, gv = rng.uniform(0.1, 50), rng.uniform(0.01, 10)
            a, b = moment_match_gamma(gm, gv)
            assert stats.gamma.mean(a, scale=1 / b) == pytest.approx(gm, rel=1e-12)
            assert stats.gamma.var(a, scale=1 / b) == pytest.approx(gv, rel=1e-12)

    def test_invalid_gamma_inputs(self):
        with pytest.raises(DomainError):
            moment_match_gamma(0.0, 1.0)


class TestPriors:
    def test_beta_prior_rescaled_density(self):
        prior = Prior(kind="beta", shape_a=2.0, shape_b=1.0, lower=0.0, upper=1.0)
        assert math.exp(prior.log_density(1.0)) == pytest.approx(2 * math.exp(prior.log_density(0.5)))

    def test_outside_support(self):
        prior = Prior(kind="beta", shape_a=1.0, shape_b=2.0, lower=0.0, upper=50.0)
        assert prior.log_density(51.0) == -math.inf

    def test_transform_midpoint_and_shift(self):
        beta = Prior(kind="beta", shape_a=1.0, shape_b=2.0, lower=0.0, upper=50.0)
        gamma = Prior(kind="gamma", shape_a=1.0, shape_b=1.0, lower=1.0)
        assert beta.from_unbounded(0.0) == pytest.approx(25.0)
        assert gamma.from_unbounded(0.0) == pytest.approx(2.0)

    def test_boundary_values_rejected(self):
        beta = Prior(kind="beta", lower=0.0, upper=1.0)
        with pytest.raises(DomainError):
            beta.to_unbounded(1.0)

    def test_beta_prior_requires_finite_upper(self):
        with pytest.raises(ValidationError):
            Prior(kind="beta", shape_a=1.0, shape_b=1.0)

    def test_d_log_density_matches_finite_difference(self):
        prior = Prior(kind="beta", shape_a=2.5, shape_b=3.5, lower=0.0, upper=50.0)
        h = 1e-6
        x = 17.0
        numeric = (prior.log_density(x + h) - prior.log_density(x - h)) / (2 * h)
        assert prior.d_log_density(x) == pytest.approx(numeric, rel=1e-7)

    def test_default_eve_priors(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        priors = default_eve_priors(alice, 3.0)
        assert priors.free_names == ("distance_ae", "channel_eff", "photons_per_pulse", "intercept_fraction")
        assert priors["distance_ae"].upper == 50.0
        assert priors["photons_per_pulse"].shape_b == pytest.approx(1.0)

    def test_halfway_rule(self):
        assert gamma_rate_for_k(3.0) == pytest.approx(1.0)
        with pytest.raises(DomainError):
            gamma_rate_for_k(1.0)

    def test_unknown_prior_name(self):
        with pytest.raises(ValidationError):
            PriorSet(priors={"gain": Prior(kind="fixed")})

    def test_fully_bayesian_priors(self):
        theta = gys_system()
        priors = fully_bayesian_priors(theta, 0.10)
        eff = priors["efficiency_0"]
        assert eff.kind == "beta"
        assert eff.mean() == pytest.approx(0.045, rel=1e-12)
        assert priors["attenuation"].kind == "gamma"
        assert priors["attenuation"].mean() == pytest.approx(0.21, rel=1e-12)
        # 关闭的后脉冲保持固定
        assert priors["afterpulse_0"].kind == "fixed"

    def test_perturb_params(self):
        theta = gys_system()
        rng = np.random.default_rng(3)
        draws = np.array([perturb_params(theta, rng).value("efficiency_0") for _ in range(2000)])
        assert draws.mean() == pytest.approx(0.045, rel=0.01)
        assert draws.std() == pytest.approx(0.05 * 0.045, rel=0.1)


class TestIntensityGrid:
    def test_gys_grid(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        grid, intensities = build_intensity_grid(alice, BobParams(**GYS_BOB), count=8, cap=10.0)
        assert len(intensities) == 8
        assert all(b > a for a, b in zip(intensities, intensities[1:]))
        assert intensities[-1] == pytest.approx(10.0)
        np.testing.assert_allclose(np.diff(intensities), np.diff(intensities)[0], rtol=1e-12)

    def test_lambda_min_balances_click_probabilities(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        bob = BobParams(efficiency=0.045, dark_count=0.0, misalignment=0.0)
        grid, _ = build_intensity_grid(alice, bob)
        honest = SystemParams(alice=alice, bob=bob)
        attacked = SystemParams(
            alice=alice, bob=bob, eve=EveParams(distance_ae=0.0, channel_eff=1.0, photons_per_pulse=1.0, intercept_fraction=1.0)
        )
        lam = grid.lambda_min
        gap = detection.matched_click_prob(honest, lam, False) - detection.matched_click_prob(attacked, lam, True)
        assert grid.lambda_min > 0
        assert abs(gap) < 1e-10 * detection.matched_click_prob(honest, lam, False)

    def test_deterministic(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        first = build_intensity_grid(alice, BobParams(**GYS_BOB))
        second = build_intensity_grid(alice, BobParams(**GYS_BOB))
        assert first == second

    def test_count_below_four(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        with pytest.raises(ConfigurationError):
            build_intensity_grid(alice, BobParams(**GYS_BOB), count=3)

    def test_grid_model_validation(self):
        with pytest.raises(ValidationError):
            IntensityGrid(lambda_min=2.0, lambda_max=1.0)


class TestKMax:
    def test_gys_root_matches_scan(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        bob = BobParams(**GYS_BOB)
        result = k_max(alice, bob, 10.0)
        assert result.found
        honest = detection.matched_click_prob(SystemParams(alice=alice, bob=bob), 10.0, False)

        def attacked(k):
            eve = EveParams(distance_ae=0.0, channel_eff=1.0, photons_per_pulse=k, intercept_fraction=1.0)
            return detection.matched_click_prob(SystemParams(alice=alice, bob=bob, eve=eve), 10.0, True)

        assert abs(attacked(result.value) - honest) < 1e-10
        # 密集扫描：根两侧的符号相反
        ks = np.linspace(1.0, 2 * result.value, 400)
        gaps = np.array([attacked(k) - honest for k in ks])
        crossing = ks[np.argmax(gaps < 0)]
        assert crossing == pytest.approx(result.value, abs=ks[1] - ks[0])

    def test_lossless_channel_has_no_root(self, caplog):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=0.0)
        bob = BobParams(**GYS_BOB)
        with caplog.at_level("WARNING", logger="src.models.params"):
            result = k_max(alice, bob, 5.0)
        assert result == (1.0, False)
        assert "k_max取1" in caplog.text
        # 无损信道上 Eve 对任何 k >= 1 都只会降低点击率，平衡点只在 k = 0
        honest = detection.matched_click_prob(SystemParams(alice=alice, bob=bob), 5.0, False)
        for k in (1.0, 1.5, 3.0, 10.0):
            eve = EveParams(distance_ae=0.0, channel_eff=1.0, photons_per_pulse=k, intercept_fraction=1.0)
            assert detection.matched_click_prob(SystemParams(alice=alice, bob=bob, eve=eve), 5.0, True) < honest
        # 先验退回默认速率
        assert default_eve_priors(alice, result.value)["photons_per_pulse"].shape_b == 1.0

    def test_accepts_grid(self):
        alice = AliceParams(intensities=(1.0,), attenuation=0.21, distance_ab=50.0)
        grid = IntensityGrid(lambda_min=0.5, lambda_max=10.0, count=8, cap=10.0)
        assert k_max(alice, BobParams(**GYS_BOB), grid) == k_max(alice, BobParams(**GYS_BOB), 10.0)
