#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试探测模块：分束概率、联合结果概率、i.i.d.概率向量、增益与误码率
"""

import math

import numpy as np
import pytest

from src.models.detection import (
    DoubleClickMode,
    PulseContext,
    _beamsplit_grad,
    adjusted_params,
    beamsplit_prob,
    cell_index,
    error_rate_interval,
    gain_error_stats,
    gain_error_table,
    iid_prob_vector,
    joint_outcome_probs,
    layout_frame,
    optimize_eve_channel,
    outcome_distribution,
    single_click_prob,
)
from src.models.params import EveParams, PARAMETER_NAMES
from src.services.simulator import gain_error_counts, simulate
from src.utils.errors import DomainError

from tests.conftest import assert_gradient_close, gys_system, random_system


class TestBeamsplitter:
    def test_matching_basis_without_misalignment(self):
        assert beamsplit_prob(0, 0, 1, 1, 0.0) == pytest.approx(1.0)
        assert beamsplit_prob(1, 0, 1, 1, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_mismatched_basis_is_fair_coin(self):
        assert beamsplit_prob(0, 1, 0, 1, 0.0) == pytest.approx(0.5)
        assert beamsplit_prob(1, 0, 1, 0, 0.0) == pytest.approx(0.5)

    def test_misalignment(self):
        assert beamsplit_prob(1, 1, 0, 0, 0.033) == pytest.approx(0.967)

    def test_invalid_misalignment(self):
        with pytest.raises(DomainError):
            beamsplit_prob(0, 0, 0, 0, 1.0)

    def test_gradient_without_misalignment(self):
        # 基匹配时导数有限，基不匹配时发散
        assert float(_beamsplit_grad(0, 0, 1, 1, 0.0)) == pytest.approx(-1.0)
        assert float(_beamsplit_grad(1, 0, 1, 1, 0.0)) == pytest.approx(1.0)
        with pytest.raises(DomainError):
            _beamsplit_grad(0, 1, 0, 1, 0.0)

    def test_misalignment_gradient_rejected_at_zero(self, gys_eve):
        theta = gys_eve.with_values({"misalignment": 0.0})
        with pytest.raises(DomainError):
            iid_prob_vector(theta, ("misalignment",))
        grads = iid_prob_vector(theta, ("efficiency_0", "intercept_fraction")).gradient
        assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestAdjustedParams:
    def test_no_interception(self, gys):
        ctx = PulseContext(a=1, b=1, x=0, e=0, lambda_index=0)
        lam, pc, k = adjusted_params(gys, ctx, 0)
        assert lam == pytest.approx(0.48 * 10 ** (-1.05))
        assert pc == pytest.approx(0.967 * 0.045)
        assert k == 0

    def test_lossless_eve_path(self):
        theta = gys_system(eve=EveParams(distance_ae=0.0, channel_eff=1.0, photons_per_pulse=2.5, intercept_fraction=1.0))
        lam, pc, k = adjusted_params(theta, PulseContext(a=0, b=0, x=1, e=1, lambda_index=1), 1)
        assert lam == pytest.approx(5.0)
        assert pc == pytest.approx(0.967 * 0.045)
        assert k == 2.5

    def test_context_validation(self):
        with pytest.raises(DomainError):
            PulseContext(a=2, b=0, x=0, e=0, lambda_index=0)


class TestJointOutcomes:
    def test_nothing_can_click(self, gys):
        theta = gys.with_intensities([0.0]).with_values({"dark_count_0": 0.0, "dark_count_1": 0.0})
        probs = joint_outcome_probs(theta, PulseContext(a=0, b=0, x=0, e=0, lambda_index=0))
        np.testing.assert_allclose(probs, [1, 0, 0, 0], atol=1e-15)

    def test_dark_counts_certain(self, gys):
        theta = gys.with_values({"dark_count_0": 1.0, "dark_count_1": 1.0})
        probs = joint_outcome_probs(theta, PulseContext(a=0, b=1, x=1, e=0, lambda_index=1))
        np.testing.assert_allclose(probs, [0, 0, 0, 1], atol=1e-15)

    def test_sums_to_one(self, gys_eve):
        for e in (0, 1):
            probs = joint_outcome_probs(gys_eve, PulseContext(a=1, b=0, x=1, e=e, lambda_index=1))
            assert probs.sum() == pytest.approx(1.0, abs=1e-14)
            assert np.all(probs >= 0)

    def test_index_out_of_range(self, gys):
        with pytest.raises(DomainError):
            joint_outcome_probs(gys, PulseContext(a=0, b=0, x=0, e=0, lambda_index=5))

    @pytest.mark.slow
    def test_simulated_single_pulse_kernel(self, gys):
        # 与逐光子仿真比较：a=b, x=0, e=0, λ=0.48
        rng = np.random.default_rng(8)
        trials = 10_000_000
        lam = 0.48 * gys.alice.channel_eff
        n = rng.poisson(lam, trials)
        to_d0 = rng.binomial(n, 0.967)
        d0 = (rng.binomial(to_d0, 0.045) > 0) | (rng.random(trials) < 1.7e-6)
        d1 = (rng.binomial(n - to_d0, 0.045) > 0) | (rng.random(trials) < 1.7e-6)
        outcome = 2 * d1.astype(int) + d0.astype(int)
        freq = np.bincount(outcome, minlength=4) / trials
        probs = joint_outcome_probs(gys, PulseContext(a=1, b=1, x=0, e=0, lambda_index=0))
        se = np.sqrt(probs * (1 - probs) / trials)
        assert np.all(np.abs(freq - probs) <= 3 * se + 1e-12)


class TestIidVector:
    def test_layout(self, gys):
        probs = iid_prob_vector(gys)
        assert probs.cells.shape == (16,)
        assert probs.cells.sum() == pytest.approx(1.0, abs=1e-12)
        frame = probs.to_frame()
        assert list(frame.columns) == ["m", "lambda_index", "outcome", "probability"]
        assert probs.cell(1, 1, 0) == probs.cells[cell_index(1, 1, 0, 2)]
        assert layout_frame(2).iloc[cell_index(1, 2, 1, 2)].tolist() == [1, 1, "10"]

    def test_no_eve_ignores_eve_parameters(self, gys):
        base = iid_prob_vector(gys).cells
        moved = gys.with_values({"distance_ae": 20.0, "channel_eff": 0.3, "photons_per_pulse": 7.0})
        np.testing.assert_array_equal(iid_prob_vector(moved).cells, base)

    def test_basis_swap_symmetry(self, gys_eve):
        for lam_index in range(2):
            np.testing.assert_allclose(
                outcome_distribution(gys_eve, 0, 1, lam_index), outcome_distribution(gys_eve, 1, 0, lam_index), atol=1e-14
            )
            np.testing.assert_allclose(
                outcome_distribution(gys_eve, 0, 0, lam_index), outcome_distribution(gys_eve, 1, 1, lam_index), atol=1e-14
            )

    def test_gradients_match_finite_differences(self, gys_eve):
        names = tuple(n for n in PARAMETER_NAMES if not n.startswith("afterpulse"))
        analytic = iid_prob_vector(gys_eve, names).gradient
        for name in names:
            x = gys_eve.value(name)
            h = 1e-6 * max(abs(x), 1e-3)
            up = iid_prob_vector(gys_eve.with_values({name: x + h})).cells
            down = iid_prob_vector(gys_eve.with_values({name: x - h})).cells
            numeric = (up - down) / (2 * h)
            np.testing.assert_allclose(analytic[name], numeric, rtol=1e-5, atol=1e-7)

    @pytest.mark.slow
    def test_gradients_at_random_interior_points(self):
        rng = np.random.default_rng(31)
        names = tuple(n for n in PARAMETER_NAMES if not n.startswith("afterpulse"))
        for _ in range(1000):
            theta = random_system(rng)
            analytic = iid_prob_vector(theta, names).gradient
            for name in names:
                x = theta.value(name)
                h = 1e-3 * max(abs(x), 1e-5)
                up = iid_prob_vector(theta.with_values({name: x + h})).cells
                down = iid_prob_vector(theta.with_values({name: x - h})).cells
                assert_gradient_close(analytic[name], (up - down) / (2 * h), rtol=1e-4, floor=1e-9)

    def test_gradients_sum_to_zero(self, gys_eve):
        grads = iid_prob_vector(gys_eve, ("intercept_fraction", "photons_per_pulse")).gradient
        for g in grads.values():
            assert g.sum() == pytest.approx(0.0, abs=1e-14)


class TestGainError:
    def test_error_free_system(self, gys):
        theta = gys.with_values({"misalignment": 0.0, "dark_count_0": 0.0, "dark_count_1": 0.0})
        stats_ = gain_error_stats(theta, 1, 0)
        assert stats_.EQ == pytest.approx(0.0, abs=1e-18)
        assert stats_.delta == pytest.approx(0.0, abs=1e-15)

    def test_exclusive_gain_vanishes_at_high_intensity(self, gys):
        theta = gys.with_values({"distance_ab": 0.0, "efficiency_0": 1.0, "efficiency_1": 1.0}).with_intensities([200.0])
        assert gain_error_stats(theta, 0, 0).Q < 1e-12

    def test_double_click_modes_ordered(self, gys_eve):
        exclusive = gain_error_table(gys_eve, DoubleClickMode.EXCLUSIVE)
        half = gain_error_table(gys_eve, DoubleClickMode.HALF_ERROR)
        both = gain_error_table(gys_eve, DoubleClickMode.COUNT_AS_GAIN_AND_ERROR)
        assert np.all(exclusive[0] <= half[0]) and np.allclose(half[0], both[0])
        assert np.all(exclusive[1] <= half[1]) and np.all(half[1] <= both[1])

    def test_error_bounded_by_gain(self, gys_eve):
        Q, EQ = gain_error_table(gys_eve)
        assert np.all((0 <= EQ) & (EQ <= Q) & (Q <= 1))

    def test_zero_error_interval_is_degenerate(self, gys):
        theta = gys.with_values({"misalignment": 0.0, "dark_count_0": 0.0, "dark_count_1": 0.0})
        approx = error_rate_interval(theta, 1, 0, 10**6)
        assert approx.interval() == (0.0, 0.0)

    def test_interval_collapses_with_pulses(self, gys):
        small = error_rate_interval(gys, 1, 0, 10**6).interval()
        large = error_rate_interval(gys, 1, 0, 10**12).interval()
        assert large[1] - large[0] < (small[1] - small[0]) / 100
        delta = gain_error_stats(gys, 1, 0).delta
        assert large[0] < delta < large[1]

    def test_simulated_error_rate_inside_interval(self, gys):
        theta = gys.with_intensities([0.48, 5.0])
        pulses = 2_000_000
        table = gain_error_counts(simulate(pulses, theta, seed=21), 2)
        sifted = table[(table["m"] == 1)].sort_values("lambda_index")
        for row in sifted.itertuples():
            low, high = error_rate_interval(theta, 1, row.lambda_index, pulses).interval(0.999)
            assert low <= row.errors / row.gains <= high


class TestEveChannel:
    def test_optimized_channel_equalizes_single_clicks(self, gys_eve):
        lam = max(gys_eve.alice.intensities)
        honest = single_click_prob(gys_eve, lam, intercept=False)
        attacked = single_click_prob(gys_eve, lam, intercept=True)
        assert attacked == pytest.approx(honest, rel=1e-9)
        assert 0 < gys_eve.eve.channel_eff < 1

    def test_optimization_is_pure(self, gys_eve):
        assert optimize_eve_channel(gys_eve) == pytest.approx(gys_eve.eve.channel_eff, abs=1e-12)
