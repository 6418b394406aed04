#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试仿真服务：随机流确定性、后脉冲叠加、计数汇总与增益误码统计
"""

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from src.models.detection import DoubleClickMode, cell_index, iid_prob_vector
from src.services.simulator import (
    CHUNK_SIZE,
    RECORD_COLUMNS,
    OutcomeCounts,
    PulseRecord,
    afterpulse_flags,
    aggregate_counts,
    derive_run_seed,
    gain_error_counts,
    iter_records,
    run_sessions,
    session_counts,
    simulate,
    simulate_hmm,
    simulate_iid,
)
from src.utils.errors import DomainError, InputError


def collect(chunks):
    return pd.concat(list(chunks), ignore_index=True)


def record_frame(rows):
    return pd.DataFrame(rows, columns=list(RECORD_COLUMNS))


class TestSimulation:
    def test_same_seed_same_records(self, gys_eve):
        first = collect(simulate(5000, gys_eve, seed=3))
        second = collect(simulate(5000, gys_eve, seed=3))
        pd.testing.assert_frame_equal(first, second)
        other = collect(simulate(5000, gys_eve, seed=4))
        assert not first.equals(other)

    def test_chunk_layout(self, gys):
        frames = list(simulate(CHUNK_SIZE + 10, gys, seed=1))
        assert [len(f) for f in frames] == [CHUNK_SIZE, 10]
        records = collect(frames)
        assert list(records.columns) == list(RECORD_COLUMNS)
        np.testing.assert_array_equal(records["t"], np.arange(CHUNK_SIZE + 10))

    def test_chunk_size_changes_stream_only_by_contract(self, gys):
        # 相同分块大小下，前缀与总脉冲数无关
        short = collect(simulate(1000, gys, seed=9, chunk_size=500))
        long = collect(simulate(1500, gys, seed=9, chunk_size=500))
        pd.testing.assert_frame_equal(short, long.iloc[:1000])

    def test_no_interception_without_eve(self, gys):
        records = collect(simulate_iid(20_000, gys, seed=2))
        assert records["e"].sum() == 0

    def test_inputs_are_uniform(self, gys_eve):
        records = collect(simulate(200_000, gys_eve, seed=5))
        for column in ("a", "b", "x", "lambda_index"):
            assert records[column].mean() == pytest.approx(0.5, abs=0.005)
        assert records["e"].mean() == pytest.approx(0.2, abs=0.005)

    def test_hmm_without_afterpulse_is_identical(self, gys_eve):
        iid = collect(simulate_iid(100_000, gys_eve, seed=6))
        hmm = collect(simulate_hmm(100_000, gys_eve, seed=6))
        pd.testing.assert_frame_equal(iid, hmm)

    def test_afterpulses_only_add_clicks(self, gys_afterpulse):
        iid = collect(simulate(100_000, gys_afterpulse, seed=7, model="iid"))
        hmm = collect(simulate(100_000, gys_afterpulse, seed=7, model="hmm"))
        for column in ("d0", "d1"):
            assert np.all(hmm[column] >= iid[column])
            assert hmm[column].sum() > iid[column].sum()

    def test_debug_checks_pass(self, gys_eve):
        assert len(collect(simulate(10_000, gys_eve, seed=8, debug=True))) == 10_000

    def test_invalid_arguments(self, gys):
        with pytest.raises(DomainError):
            list(simulate(-1, gys, seed=0))
        with pytest.raises(DomainError):
            list(simulate(10, gys, seed=0, model="markov"))

    def test_zero_pulses(self, gys):
        assert list(simulate(0, gys, seed=0)) == []
        assert session_counts(0, gys, seed=0).total == 0


class TestAfterpulseFlags:
    def test_alternation_within_runs(self):
        genuine = np.array([1, 1, 1, 0, 1, 0], dtype=bool)
        fire = np.ones(6, dtype=bool)
        np.testing.assert_array_equal(afterpulse_flags(genuine, fire), [False, True, False, True, False, True])

    def test_certain_afterpulse_follows_isolated_click(self):
        genuine = np.zeros(50, dtype=bool)
        genuine[[3, 10, 11, 30]] = True
        after = afterpulse_flags(genuine, np.ones(50, dtype=bool))
        assert after[4] and after[11] and after[31]
        assert not after[12]

    def test_carry_across_chunks(self):
        rng = np.random.default_rng(0)
        genuine = rng.random(1000) < 0.4
        fire = rng.random(1000) < 0.7
        whole = afterpulse_flags(genuine, fire)
        head = afterpulse_flags(genuine[:437], fire[:437])
        tail = afterpulse_flags(genuine[437:], fire[437:], bool(genuine[436]), bool(head[-1]))
        np.testing.assert_array_equal(np.concatenate([head, tail]), whole)

    def test_rule_matches_sequential_definition(self):
        rng = np.random.default_rng(1)
        genuine = rng.random(500) < 0.5
        fire = rng.random(500) < 0.5
        expected = np.zeros(500, dtype=bool)
        for i in range(1, 500):
            expected[i] = genuine[i - 1] and fire[i] and not expected[i - 1]
        np.testing.assert_array_equal(afterpulse_flags(genuine, fire), expected)


class TestAggregation:
    def test_empty_session(self):
        counts = aggregate_counts([], 2)
        assert counts.total == 0
        assert counts.cells.shape == (16,)

    def test_single_record(self):
        record = PulseRecord(t=0, d0=1, d1=0, lambda_index=1, a=0, b=0, x=0, e=0)
        counts = aggregate_counts([record], 2)
        assert counts.total == 1
        assert counts.cells[cell_index(1, 1, 1, 2)] == 1

    def test_basis_mismatch(self):
        frame = record_frame([(0, 1, 1, 0, 0, 1, 1, 0)])
        counts = aggregate_counts(frame, 1)
        assert counts.cells[cell_index(0, 3, 0, 1)] == 1

    def test_totals_conserved(self, gys_eve):
        counts = session_counts(30_000, gys_eve, seed=4)
        assert counts.total == 30_000
        frame = counts.to_frame()
        assert len(frame) == 16
        assert frame["count"].sum() == 30_000

    def test_iter_records(self, gys):
        records = list(iter_records(simulate(100, gys, seed=2)))
        assert len(records) == 100
        np.testing.assert_array_equal(
            aggregate_counts(records, 2).cells, aggregate_counts(simulate(100, gys, seed=2), 2).cells
        )

    def test_out_of_range_lambda(self):
        with pytest.raises(InputError):
            aggregate_counts(record_frame([(0, 0, 0, 3, 0, 0, 0, 0)]), 2)


class TestOutcomeCounts:
    def test_validation(self):
        with pytest.raises(InputError):
            OutcomeCounts(np.zeros(7), 1)
        with pytest.raises(InputError):
            OutcomeCounts(np.array([-1, 0, 0, 0, 0, 0, 0, 1]), 1)

    def test_addition(self):
        total = OutcomeCounts(np.ones(8), 1) + OutcomeCounts(np.arange(8), 1)
        np.testing.assert_array_equal(total.cells, np.arange(8) + 1)
        with pytest.raises(InputError):
            OutcomeCounts(np.ones(8), 1) + OutcomeCounts(np.ones(16), 2)

    def test_from_shuffled_frame(self, gys):
        counts = session_counts(5000, gys, seed=1)
        shuffled = counts.to_frame().sample(frac=1.0, random_state=0)
        np.testing.assert_array_equal(OutcomeCounts.from_frame(shuffled, 2).cells, counts.cells)

    def test_from_frame_errors(self, gys):
        frame = session_counts(1000, gys, seed=1).to_frame()
        with pytest.raises(InputError):
            OutcomeCounts.from_frame(frame.drop(columns=["count"]), 2)
        with pytest.raises(InputError):
            OutcomeCounts.from_frame(frame, 3)
        with pytest.raises(InputError):
            OutcomeCounts.from_frame(frame, 1)
        duplicated = pd.concat([frame.iloc[:-1], frame.iloc[:1]], ignore_index=True)
        with pytest.raises(InputError):
            OutcomeCounts.from_frame(duplicated, 2)
        bad_label = frame.assign(outcome=frame["outcome"].replace("11", "22"))
        with pytest.raises(InputError):
            OutcomeCounts.from_frame(bad_label, 2)


class TestGainErrorCounts:
    ROWS = [
        # t, d0, d1, λ, a, b, x, e
        (0, 1, 0, 0, 0, 0, 0, 0),  # 正确
        (1, 0, 1, 0, 0, 0, 0, 0),  # 误码
        (2, 1, 1, 0, 0, 0, 0, 0),  # 双击
        (3, 0, 0, 0, 0, 0, 1, 0),  # 无点击
        (4, 1, 0, 0, 1, 0, 1, 0),  # 基不匹配时 x=1 的误码
    ]

    def test_exclusive(self):
        table = gain_error_counts(record_frame(self.ROWS), 1)
        matched = table[table["m"] == 1].iloc[0]
        assert (matched.pulses, matched.gains, matched.errors) == (4, 2.0, 1.0)
        mismatched = table[table["m"] == 0].iloc[0]
        assert (mismatched.pulses, mismatched.gains, mismatched.errors) == (1, 1.0, 1.0)

    @pytest.mark.parametrize(
        "mode, gains, errors",
        [(DoubleClickMode.COUNT_AS_GAIN_AND_ERROR, 3.0, 2.0), (DoubleClickMode.HALF_ERROR, 3.0, 1.5)],
    )
    def test_double_click_modes(self, mode, gains, errors):
        table = gain_error_counts(record_frame(self.ROWS), 1, mode)
        matched = table[table["m"] == 1].iloc[0]
        assert (matched.gains, matched.errors) == (gains, errors)


class TestSessions:
    def test_run_seeds_differ(self):
        seeds = {derive_run_seed(11, r) for r in range(10)}
        assert len(seeds) == 10
        assert derive_run_seed(11, 0) == derive_run_seed(11, 0)

    def test_independent_of_workers(self, gys_eve):
        serial = run_sessions(5000, gys_eve, seed=11, runs=3)
        parallel = run_sessions(5000, gys_eve, seed=11, runs=3, workers=2)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.cells, b.cells)
        assert not np.array_equal(serial[0].cells, serial[1].cells)

    @pytest.mark.slow
    def test_counts_cover_iid_probabilities(self, gys_eve):
        pulses = 1_000_000
        counts = session_counts(pulses, gys_eve, seed=12)
        probs = iid_prob_vector(gys_eve).cells
        low, high = stats.binom.interval(0.9999, pulses, probs)
        assert np.all((low <= counts.cells) & (counts.cells <= high))
