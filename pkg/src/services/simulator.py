#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
仿真服务模块 - 负责脉冲级蒙特卡洛仿真（i.i.d. 与后脉冲两种情形）以及观测计数汇总
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.models.detection import OUTCOME_LABELS, DoubleClickMode, layout_frame
from src.utils.errors import DomainError, InputError, ModelConsistencyError

logger = logging.getLogger(__name__)

# 固定的分块大小是随机流契约的一部分：修改它会改变输出
CHUNK_SIZE = 1 << 16

RECORD_COLUMNS = ("t", "d0", "d1", "lambda_index", "a", "b", "x", "e")
COUNT_COLUMNS = ("m", "lambda_index", "outcome", "count")

_GENUINE_STREAM = 0
_AFTERPULSE_STREAM = 1


@dataclass(frozen=True)
class PulseRecord:
    """单个脉冲的仿真记录"""

    t: int
    d0: int
    d1: int
    lambda_index: int
    a: int
    b: int
    x: int
    e: int

    @property
    def m(self):
        return int(self.a == self.b)


@dataclass(frozen=True)
class OutcomeCounts:
    """
    与 OutcomeProbs 布局一致的 8·N_λ 单元计数
    """

    cells: np.ndarray
    n_lambda: int

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.shape != (8 * self.n_lambda,):
            raise InputError(f"计数向量长度 {cells.shape} 与 8·N_λ={8 * self.n_lambda} 不符")
        if np.any(cells < 0):
            raise InputError("计数不能为负")
        object.__setattr__(self, "cells", cells.astype(np.int64))

    @property
    def total(self):
        return int(self.cells.sum())

    def __add__(self, other):
        if other.n_lambda != self.n_lambda:
            raise InputError("强度数量不同的计数不能相加")
        return OutcomeCounts(self.cells + other.cells, self.n_lambda)

    def to_frame(self):
        frame = layout_frame(self.n_lambda)
        frame["count"] = self.cells
        return frame[list(COUNT_COLUMNS)]

    @classmethod
    def from_frame(cls, frame, n_lambda):
        """
        从计数表还原，行可以任意排列但必须恰好覆盖所有单元

        Args:
            frame (pandas.DataFrame): 含 m, lambda_index, outcome, count 列的表
            n_lambda (int): 配置中的强度数量

        Returns:
            OutcomeCounts: 计数对象
        """
        missing = set(COUNT_COLUMNS) - set(frame.columns)
        if missing:
            raise InputError(f"计数表缺少列: {sorted(missing)}")
        outcome = frame["outcome"].astype(str).str.zfill(2)
        if not outcome.isin(OUTCOME_LABELS).all():
            raise InputError("计数表包含未知的结果标签")
        lam = frame["lambda_index"].astype(int)
        if lam.min() < 0 or lam.max() >= n_lambda:
            raise InputError(f"计数表的强度下标超出配置范围（N_λ={n_lambda}）")
        if len(frame) != 8 * n_lambda:
            raise InputError(f"计数表有 {len(frame)} 行，配置要求 {8 * n_lambda} 行")
        o = outcome.map(OUTCOME_LABELS.index).to_numpy()
        index = (frame["m"].astype(int).to_numpy() * 4 + o) * n_lambda + lam.to_numpy()
        if len(np.unique(index)) != len(index):
            raise InputError("计数表存在重复单元")
        cells = np.zeros(8 * n_lambda, dtype=np.int64)
        cells[index] = frame["count"].astype(np.int64).to_numpy()
        return cls(cells, n_lambda)


def chunk_generator(seed, stream, chunk_index):
    """第 stream 条子流的第 chunk_index 个分块所用的 Philox 生成器"""
    bit_generator = np.random.Philox(key=int(seed) + (int(stream) << 64))
    return np.random.Generator(bit_generator.jumped(int(chunk_index)))


def derive_run_seed(seed, run):
    """由主种子与重复编号派生独立的会话种子"""
    return int(np.random.SeedSequence((int(seed), int(run))).generate_state(1, np.uint64)[0])


def _genuine_chunk(theta, start, size, seed, chunk_index, debug=False):
    """单个分块的 i.i.d. 仿真（逐行对应 i.i.d. 仿真算法，已向量化）"""
    rng = chunk_generator(seed, _GENUINE_STREAM, chunk_index)
    alice, bob, eve = theta.alice, theta.bob, theta.eve
    lam = np.asarray(alice.intensities)

    l_idx = rng.integers(alice.n_lambda, size=size)
    x = rng.integers(2, size=size)
    a = rng.integers(2, size=size)
    b = rng.integers(2, size=size)
    e = rng.random(size) < eve.intercept_fraction

    n_a = rng.poisson(lam[l_idx])
    # 仿真中 k 取整
    n_e = np.maximum(rng.binomial(n_a, theta.eve_path_eff) - math.floor(eve.photons_per_pulse), 0)
    n_b = np.where(e, rng.binomial(n_e, eve.channel_eff), rng.binomial(n_a, alice.channel_eff))

    p_0 = np.cos(0.5 * np.pi * x - 0.25 * np.pi * (a - b) + np.arcsin(np.sqrt(bob.misalignment))) ** 2
    n_0 = rng.binomial(n_b, p_0)
    photons = (n_0, n_b - n_0)

    clicks = []
    for j in (0, 1):
        dark = rng.random(size) < bob.dark_count[j]
        detected = rng.binomial(photons[j], bob.efficiency[j])
        if debug and np.any(detected > photons[j]):
            raise ModelConsistencyError("探测到的光子数超过到达的光子数")
        clicks.append(dark | (detected >= 1))

    if debug and np.any(n_b > n_a):
        raise ModelConsistencyError("到达Bob的光子数超过发射的光子数")
    return {
        "t": np.arange(start, start + size, dtype=np.int64),
        "d0": clicks[0],
        "d1": clicks[1],
        "lambda_index": l_idx,
        "a": a,
        "b": b,
        "x": x,
        "e": e,
    }


def afterpulse_flags(genuine, fire, previous_genuine=False, previous_after=False):
    """
    后脉冲标志：前一脉冲为真实点击（非后脉冲）且本脉冲触发时置位
    即 a[i] = G[i-1] ∧ u[i] ∧ ¬a[i-1]，在连续候选段内按奇偶交替

    Args:
        genuine (array): 真实点击（布尔）
        fire (array): Bernoulli(p_a) 触发（布尔）
        previous_genuine (bool): 上一分块最后一个脉冲的真实点击
        previous_after (bool): 上一分块最后一个脉冲的后脉冲标志

    Returns:
        numpy.ndarray: 后脉冲标志
    """
    genuine = np.asarray(genuine, dtype=bool)
    prev = np.concatenate(([previous_genuine], genuine[:-1]))
    candidate = np.concatenate(([previous_after], prev & np.asarray(fire, dtype=bool)))
    idx = np.arange(candidate.size)
    run_start = np.maximum.accumulate(np.where(~candidate, idx, -1))
    offset = idx - run_start - 1
    return (candidate & (offset % 2 == 0))[1:]


def _simulate(pulses, theta, seed, model, chunk_size, debug, progress):
    if pulses < 0:
        raise DomainError("脉冲数不能为负")
    if model not in ("iid", "hmm"):
        raise DomainError(f"未知的仿真模型: {model}")
    n_chunks = math.ceil(pulses / chunk_size)
    carry = [(False, False), (False, False)]
    for index in tqdm(range(n_chunks), desc=f"仿真({model})", unit="块", disable=not progress):
        start = index * chunk_size
        size = min(chunk_size, pulses - start)
        chunk = _genuine_chunk(theta, start, size, seed, index, debug)
        if model == "hmm":
            rng = chunk_generator(seed, _AFTERPULSE_STREAM, index)
            for j, column in enumerate(("d0", "d1")):
                fire = rng.random(size) < theta.bob.afterpulse[j]
                genuine = chunk[column]
                after = afterpulse_flags(genuine, fire, *carry[j])
                carry[j] = (bool(genuine[-1]), bool(after[-1]))
                chunk[column] = genuine | after
        frame = pd.DataFrame(chunk)
        for column in ("d0", "d1", "e"):
            frame[column] = frame[column].astype(np.int8)
        yield frame[list(RECORD_COLUMNS)]


def simulate_iid(pulses, theta, seed, chunk_size=CHUNK_SIZE, debug=False, progress=False) -> Iterator[pd.DataFrame]:
    """
    i.i.d. 假设下的脉冲仿真，按分块产出记录表

    Args:
        pulses (int): 脉冲数 N
        theta (SystemParams): 系统参数
        seed (int): 随机种子
        chunk_size (int): 分块大小（属于随机流契约，默认 CHUNK_SIZE）
        debug (bool): 是否检查光子守恒
        progress (bool): 是否显示进度条

    Yields:
        pandas.DataFrame: 列为 t, d0, d1, lambda_index, a, b, x, e
    """
    return _simulate(pulses, theta, seed, "iid", chunk_size, debug, progress)


def simulate_hmm(pulses, theta, seed, chunk_size=CHUNK_SIZE, debug=False, progress=False) -> Iterator[pd.DataFrame]:
    """
    带后脉冲的脉冲仿真：先做 i.i.d. 仿真，再叠加后脉冲
    p_a=(0,0) 时与 simulate_iid 逐字节相同
    """
    return _simulate(pulses, theta, seed, "hmm", chunk_size, debug, progress)


def simulate(pulses, theta, seed, model="iid", **kwargs):
    return _simulate(
        pulses,
        theta,
        seed,
        model,
        kwargs.get("chunk_size", CHUNK_SIZE),
        kwargs.get("debug", False),
        kwargs.get("progress", False),
    )


def iter_records(chunks: Iterable[pd.DataFrame]) -> Iterator[PulseRecord]:
    """将记录表逐行展开为 PulseRecord"""
    for frame in chunks:
        for row in frame.itertuples(index=False):
            yield PulseRecord(*(int(v) for v in row))


def _frame_counts(frame, n_lambda):
    m = (frame["a"].to_numpy() == frame["b"].to_numpy()).astype(np.int64)
    outcome = 2 * frame["d1"].to_numpy().astype(np.int64) + frame["d0"].to_numpy().astype(np.int64)
    lam = frame["lambda_index"].to_numpy().astype(np.int64)
    if lam.size and (lam.min() < 0 or lam.max() >= n_lambda):
        raise InputError("记录中的强度下标超出范围")
    return np.bincount((m * 4 + outcome) * n_lambda + lam, minlength=8 * n_lambda)


def _as_frames(records):
    if isinstance(records, pd.DataFrame):
        yield records
        return
    pending: List[PulseRecord] = []
    for item in records:
        if isinstance(item, pd.DataFrame):
            yield item
        else:
            pending.append(item)
    if pending:
        yield pd.DataFrame([asdict(r) for r in pending], columns=list(RECORD_COLUMNS))


def aggregate_counts(records, n_lambda) -> OutcomeCounts:
    """
    汇总一次会话的记录为观测计数，m = [a == b]

    Args:
        records: 记录表、记录表序列或 PulseRecord 序列
        n_lambda (int): 强度数量

    Returns:
        OutcomeCounts: 计数
    """
    cells = np.zeros(8 * n_lambda, dtype=np.int64)
    for frame in _as_frames(records):
        cells += _frame_counts(frame, n_lambda)
    return OutcomeCounts(cells, n_lambda)


def gain_error_counts(records, n_lambda, mode=DoubleClickMode.EXCLUSIVE):
    """
    按 (m, λ) 统计增益次数与误码次数
    x=0 时误码为仅探测器1点击，x=1 时为仅探测器0点击

    Args:
        records: 记录表或其序列
        n_lambda (int): 强度数量
        mode (DoubleClickMode): 双击计数约定

    Returns:
        pandas.DataFrame: 列为 m, lambda_index, pulses, gains, errors
    """
    mode = DoubleClickMode(mode)
    shape = (2, n_lambda)
    pulses = np.zeros(shape)
    gains = np.zeros(shape)
    errors = np.zeros(shape)
    for frame in _as_frames(records):
        m = (frame["a"].to_numpy() == frame["b"].to_numpy()).astype(int)
        lam = frame["lambda_index"].to_numpy().astype(int)
        d0 = frame["d0"].to_numpy().astype(bool)
        d1 = frame["d1"].to_numpy().astype(bool)
        x = frame["x"].to_numpy().astype(bool)
        single = d0 ^ d1
        double = d0 & d1
        wrong = single & np.where(x, d0, d1)
        gain = single.astype(float)
        error = wrong.astype(float)
        if mode is DoubleClickMode.COUNT_AS_GAIN_AND_ERROR:
            gain, error = gain + double, error + double
        elif mode is DoubleClickMode.HALF_ERROR:
            gain, error = gain + double, error + 0.5 * double
        np.add.at(pulses, (m, lam), 1.0)
        np.add.at(gains, (m, lam), gain)
        np.add.at(errors, (m, lam), error)
    m_idx, l_idx = np.meshgrid(np.arange(2), np.arange(n_lambda), indexing="ij")
    return pd.DataFrame(
        {
            "m": m_idx.ravel(),
            "lambda_index": l_idx.ravel(),
            "pulses": pulses.ravel().astype(np.int64),
            "gains": gains.ravel(),
            "errors": errors.ravel(),
        }
    )


def session_counts(pulses, theta, seed, model="iid", progress=False) -> OutcomeCounts:
    """仿真一次会话并直接返回观测计数"""
    return aggregate_counts(simulate(pulses, theta, seed, model, progress=progress), theta.alice.n_lambda)


def _session_worker(args):
    pulses, theta, seed, model = args
    return session_counts(pulses, theta, seed, model)


def run_sessions(pulses, theta, seed, runs, model="iid", workers: Optional[int] = None, progress=False):
    """
    重复仿真多次会话；每次会话使用派生种子，结果与并行方式无关

    Args:
        pulses (int): 每次会话的脉冲数
        theta (SystemParams): 系统参数
        seed (int): 主种子
        runs (int): 会话次数
        model (str): iid 或 hmm
        workers (int): 进程数，None 或 1 表示串行
        progress (bool): 是否显示进度条

    Returns:
        list: 每次会话的 OutcomeCounts
    """
    tasks = [(pulses, theta, derive_run_seed(seed, r), model) for r in range(runs)]
    if not workers or workers <= 1:
        return [_session_worker(t) for t in tqdm(tasks, desc="会话", unit="次", disable=not progress)]
    logger.info("使用 %d 个进程仿真 %d 次会话", workers, runs)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        results = executor.map(_session_worker, tasks)
        return list(tqdm(results, total=runs, desc="会话", unit="次", disable=not progress))


if __name__ == "__main__":
    from src.models.params import AliceParams, BobParams, EveParams, SystemParams

    theta = SystemParams(
        alice=AliceParams(intensities=(0.48, 5.0), attenuation=0.21, distance_ab=50.0),
        bob=BobParams(afterpulse=0.1, efficiency=0.045, dark_count=1.7e-6, misalignment=0.033),
        eve=EveParams(distance_ae=10.0, channel_eff=0.5, photons_per_pulse=3.0, intercept_fraction=0.2),
    )
    counts = session_counts(200_000, theta, seed=7, model="hmm", progress=True)
    print(counts.to_frame())
    print("总计:", counts.total)
