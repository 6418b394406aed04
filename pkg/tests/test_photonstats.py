#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试光子统计模块：不完全Gamma函数、各组件点击概率及其导数
"""

import math

import numpy as np
import pytest
from scipy import stats

from src.models.photonstats import (
    click_prob_detector,
    click_prob_laser_detector,
    effective_efficiency,
    effective_intensity,
    pair_union_params,
    pns_click_prob,
    reg_gamma_lower,
    reg_gamma_upper,
)
from src.utils.errors import DomainError

from tests.conftest import assert_gradient_close


def central_difference(fn, x, rel=1e-6):
    h = rel * max(abs(x), 1.0)
    return (fn(x + h) - fn(x - h)) / (2 * h)


class TestIncompleteGamma:
    @pytest.mark.parametrize("x", [0.0, 0.3, 1.0, 7.5])
    def test_unit_shape_is_exponential(self, x):
        assert reg_gamma_upper(1.0, x) == pytest.approx(math.exp(-x), rel=1e-14)

    def test_zero_argument_is_one(self):
        assert reg_gamma_upper(2.5, 0.0) == 1.0

    def test_poisson_cdf_identity(self):
        assert reg_gamma_upper(2.0, 1.0) == pytest.approx(2 * math.exp(-1), abs=1e-12)
        assert reg_gamma_upper(2.0, 1.0) == pytest.approx(0.735759, abs=1e-6)

    def test_zero_shape_convention(self):
        assert reg_gamma_upper(0.0, 1.3) == 0.0
        assert reg_gamma_lower(0.0, 1.3) == 1.0

    def test_upper_plus_lower_is_one(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(0.1, 20, 1000)
        x = rng.uniform(0, 30, 1000)
        np.testing.assert_allclose(reg_gamma_upper(s, x) + reg_gamma_lower(s, x), 1.0, atol=1e-14)

    def test_negative_arguments_rejected(self):
        with pytest.raises(DomainError):
            reg_gamma_upper(-1.0, 1.0)
        with pytest.raises(DomainError):
            reg_gamma_lower(1.0, -0.1)


class TestComponents:
    def test_detector_examples(self):
        assert click_prob_detector(0, 0.7, 0.01).value == pytest.approx(0.01)
        assert click_prob_detector(1, 1.0, 0.0).value == 1.0
        assert click_prob_detector(2, 0.5, 0.1).value == pytest.approx(0.775)

    def test_detector_enumeration_oracle(self):
        # 逐光子枚举：每个光子独立以 p_c 被探测
        p_c, p_d = 0.5, 0.1
        miss_all = sum(
            stats.binom.pmf(j, 2, p_c) * (1 if j == 0 else 0) for j in range(3)
        )
        assert click_prob_detector(2, p_c, p_d).value == pytest.approx(1 - (1 - p_d) * miss_all, abs=1e-15)

    def test_detector_requires_integer_photons(self):
        with pytest.raises(DomainError):
            click_prob_detector(1.5, 0.5, 0.1)

    def test_effective_efficiency(self):
        assert effective_efficiency(1, 1, 0.37) == pytest.approx(0.37)
        assert effective_efficiency(0.5, 0.5, 0.8) == pytest.approx(0.2)

    def test_fiber_then_detector_composition(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p_f, p_i, p_c, p_d = rng.uniform(size=4)
            for n in range(7):
                # 对通过光纤与分束器的光子数求和
                marginal = sum(
                    stats.binom.pmf(j, n, p_f * p_i) * click_prob_detector(j, p_c, p_d).value for j in range(n + 1)
                )
                direct = click_prob_detector(n, effective_efficiency(p_f, p_i, p_c), p_d).value
                assert marginal == pytest.approx(direct, abs=1e-12)

    def test_effective_intensity(self):
        assert effective_intensity(3.2, 1.0) == pytest.approx(3.2)
        assert effective_intensity(0.0, 0.4) == 0.0

    def test_poisson_thinning(self):
        lam, p_f = 2.0, 0.3
        support = np.arange(21)
        thinned = [
            sum(stats.poisson.pmf(n, lam) * stats.binom.pmf(j, n, p_f) for n in range(j, 80)) for j in support
        ]
        expected = stats.poisson.pmf(support, effective_intensity(lam, p_f))
        assert 0.5 * np.abs(np.array(thinned) - expected).sum() < 1e-10

    def test_pair_union_examples(self):
        assert pair_union_params(0.5, 0.4, 0.4, 0.0, 0.0) == pytest.approx((0.4, 0.0))
        assert pair_union_params(1.0, 0.3, 0.9, 0.1, 0.2) == pytest.approx((0.3, 0.28))

    def test_pair_union_enumeration(self):
        rng = np.random.default_rng(3)
        n = 3
        for _ in range(500):
            p_0, p_c0, p_c1, p_d0, p_d1 = rng.uniform(size=5)
            no_click = sum(
                stats.binom.pmf(j, n, p_0) * (1 - p_d0) * (1 - p_c0) ** j * (1 - p_d1) * (1 - p_c1) ** (n - j)
                for j in range(n + 1)
            )
            p_c, p_d = pair_union_params(p_0, p_c0, p_c1, p_d0, p_d1)
            assert click_prob_detector(n, p_c, p_d).value == pytest.approx(1 - no_click, abs=1e-12)

    def test_laser_detector_examples(self):
        assert click_prob_laser_detector(0.0, 0.3, 0.02).value == pytest.approx(0.02)
        assert click_prob_laser_detector(1.7, 1.0, 0.0).value == pytest.approx(1 - math.exp(-1.7))

    @pytest.mark.slow
    def test_laser_detector_monte_carlo(self):
        lam, p_c, p_d = 0.48, 0.045, 1.7e-6
        rng = np.random.default_rng(4)
        trials = 10_000_000
        photons = rng.poisson(lam, trials)
        clicks = (rng.binomial(photons, p_c) > 0) | (rng.random(trials) < p_d)
        p = click_prob_laser_detector(lam, p_c, p_d).value
        se = math.sqrt(p * (1 - p) / trials)
        assert abs(clicks.mean() - p) < 3 * se


class TestPNS:
    def test_zero_photons_taken_equals_plain_detector(self):
        for lam, p_c, p_d in [(0.48, 0.045, 1.7e-6), (3.0, 0.5, 0.01), (10.0, 0.9, 0.0)]:
            assert pns_click_prob(lam, p_c, p_d, 0.0).value == click_prob_laser_detector(lam, p_c, p_d).value

    def test_eve_takes_everything(self):
        assert pns_click_prob(5.0, 0.3, 0.01, 500.0).value == pytest.approx(0.01, abs=1e-12)

    def test_perfect_detector_limit(self):
        # q_c = 0：转发的光子全部被探测，只剩 Γ̄ 项
        lam, k = 2.0, 1.5
        expected = 1.0 - reg_gamma_upper(k, lam) - (lam**k / math.gamma(k + 1)) * math.exp(-lam)
        assert pns_click_prob(lam, 1.0, 0.0, k).value == pytest.approx(expected, abs=1e-12)

    def test_integer_k_matches_truncated_sum(self):
        # 整数k：剩余光子数为 max(n-k, 0)
        lam, p_c, p_d, k = 1.8, 0.4, 0.02, 2
        n = np.arange(200)
        miss = (1 - p_c) ** np.maximum(n - k, 0)
        expected = 1 - (1 - p_d) * np.sum(stats.poisson.pmf(n, lam) * miss)
        assert pns_click_prob(lam, p_c, p_d, float(k)).value == pytest.approx(expected, abs=1e-12)

    @pytest.mark.slow
    def test_monte_carlo_single_photon_removed(self):
        lam, p_c, k = 1.0, 0.5, 1
        rng = np.random.default_rng(5)
        trials = 10_000_000
        photons = rng.poisson(lam, trials)
        forwarded = photons - np.minimum(photons, k)
        clicks = rng.binomial(forwarded, p_c) > 0
        p = pns_click_prob(lam, p_c, 0.0, float(k)).value
        se = math.sqrt(p * (1 - p) / trials)
        assert abs(clicks.mean() - p) < 3 * se

    def test_probabilities_in_unit_interval(self):
        rng = np.random.default_rng(6)
        size = 20_000
        value = pns_click_prob(
            rng.uniform(0, 10, size), rng.uniform(0, 1, size), rng.uniform(0, 0.1, size), rng.uniform(0, 20, size)
        ).value
        assert np.all((value >= 0) & (value <= 1))

    def test_monotonicity(self):
        ks = np.linspace(0, 10, 41)
        by_k = pns_click_prob(4.0, 0.3, 1e-3, ks).value
        assert np.all(np.diff(by_k) <= 1e-15)
        lams = np.linspace(0, 10, 41)
        by_lam = pns_click_prob(lams, 0.3, 1e-3, 2.5).value
        assert np.all(np.diff(by_lam) >= -1e-15)
        p_cs = np.linspace(0.01, 1.0, 41)
        by_pc = pns_click_prob(4.0, p_cs, 1e-3, 2.5).value
        assert np.all(np.diff(by_pc) >= -1e-15)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            point = {
                "lam": rng.uniform(0.5, 8.0),
                "p_c": rng.uniform(0.05, 0.9),
                "p_d": rng.uniform(1e-4, 0.05),
                "k": rng.uniform(1.1, 6.0),
            }
            analytic = pns_click_prob(**point, gradient=True).gradient
            for key in ("lam", "p_c", "p_d", "k"):

                def shifted(v, key=key):
                    return pns_click_prob(**{**point, key: v}).value

                numeric = central_difference(shifted, point[key])
                assert analytic[key] == pytest.approx(numeric, rel=1e-5, abs=1e-10)

    @pytest.mark.slow
    def test_gradients_at_random_interior_points(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            point = {
                "lam": rng.uniform(0.05, 10.0),
                "p_c": rng.uniform(0.01, 0.99),
                "p_d": rng.uniform(1e-5, 0.1),
                "k": rng.uniform(1.0 + 1e-3, 8.0),
            }
            analytic = pns_click_prob(**point, gradient=True).gradient
            numeric = []
            for key in ("lam", "p_c", "p_d", "k"):

                def shifted(v, key=key):
                    return pns_click_prob(**{**point, key: v}).value

                numeric.append(central_difference(shifted, point[key]))
            assert_gradient_close([analytic[key] for key in ("lam", "p_c", "p_d", "k")], numeric, rtol=1e-5)

    def test_gradient_subset(self):
        result = pns_click_prob(2.0, 0.3, 0.01, 2.0, gradient=("k",))
        assert set(result.gradient) == {"k"}

    def test_log_complement(self):
        result = pns_click_prob(3.0, 0.2, 0.01, 1.5)
        assert result.log_complement == pytest.approx(math.log1p(-result.value), rel=1e-12)
