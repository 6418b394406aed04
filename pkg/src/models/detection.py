#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
探测模块 - 负责双探测器接收端的联合点击概率、i.i.d.观测概率向量以及增益/误码统计
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
import pandas as pd
from scipy import optimize, stats

from src.models.params import LN10_OVER_10, moment_match_beta
from src.models.photonstats import pns_click_prob
from src.utils.errors import DomainError, ModelConsistencyError

logger = logging.getLogger(__name__)

# 观测结果标签 "ij"：i 为探测器1，j 为探测器0
OUTCOME_LABELS = ("00", "01", "10", "11")
NEGATIVE_CELL_TOLERANCE = 1e-12


class DoubleClickMode(str, enum.Enum):
    """双击事件的计数约定"""

    EXCLUSIVE = "exclusive"
    COUNT_AS_GAIN_AND_ERROR = "count_as_gain_and_error"
    HALF_ERROR = "half_error"


def cell_index(m, outcome, lambda_index, n_lambda):
    """
    观测单元在概率/计数向量中的位置：m 为主序，其次结果 00,01,10,11，最后强度下标

    Args:
        m (int): 基匹配标志
        outcome (int): 结果编号 0..3（即 2·D1 + D0）
        lambda_index (int): 强度下标
        n_lambda (int): 强度数量

    Returns:
        int: 向量下标
    """
    return (m * 4 + outcome) * n_lambda + lambda_index


def layout_frame(n_lambda):
    """返回与单元布局一致的 (m, lambda_index, outcome) 表"""
    m, outcome, lam = np.meshgrid(np.arange(2), np.arange(4), np.arange(n_lambda), indexing="ij")
    return pd.DataFrame(
        {
            "m": m.ravel(),
            "lambda_index": lam.ravel(),
            "outcome": [OUTCOME_LABELS[o] for o in outcome.ravel()],
        }
    )


@dataclass(frozen=True)
class PulseContext:
    """单个脉冲的条件集合 (a, b, x, e, λ下标)"""

    a: int
    b: int
    x: int
    e: int
    lambda_index: int

    def __post_init__(self):
        for name in ("a", "b", "x", "e"):
            if getattr(self, name) not in (0, 1):
                raise DomainError(f"{name} 必须为0或1")
        if self.lambda_index < 0:
            raise DomainError("强度下标不能为负")


@dataclass(frozen=True)
class OutcomeProbs:
    """
    8·N_λ 单元的观测概率向量及（可选）对扁平参数的梯度
    """

    cells: np.ndarray
    n_lambda: int
    gradient: Dict[str, np.ndarray] = field(default_factory=dict)

    def cell(self, m, outcome, lambda_index):
        return float(self.cells[cell_index(m, outcome, lambda_index, self.n_lambda)])

    def to_frame(self):
        frame = layout_frame(self.n_lambda)
        frame["probability"] = self.cells
        return frame


@dataclass(frozen=True)
class GainErrorStats:
    """给定 (m, λ) 的增益、误码增益与条件误码率"""

    Q: float
    EQ: float
    delta: Optional[float]


@dataclass(frozen=True)
class ErrorRateApprox:
    """
    误码率的Beta近似分布

    Attributes:
        alpha, beta: Beta形状参数（退化时为None）
        mean: 期望误码率
        variance: 方差 δ(1-δ)/(N·Q·P(m)·P(λ))
    """

    alpha: Optional[float]
    beta: Optional[float]
    mean: float
    variance: float

    def quantile(self, q):
        if self.alpha is None:
            return self.mean
        return float(stats.beta.ppf(q, self.alpha, self.beta))

    def interval(self, level=0.99):
        tail = 0.5 * (1.0 - level)
        return self.quantile(tail), self.quantile(1.0 - tail)


def beamsplit_prob(i, x, a, b, p_e):
    """
    光子到达探测器 i 的概率 cos²(π/2(i+x) - π/4(a-b) + arcsin√p_e)

    Args:
        i (int): 探测器下标
        x (int): 数据比特
        a, b (int): Alice与Bob的基
        p_e (float): 失准概率

    Returns:
        float or array: 到达概率
    """
    if np.any(np.asarray(p_e) < 0) or np.any(np.asarray(p_e) >= 1):
        raise DomainError("失准概率必须位于[0,1)")
    angle = 0.5 * np.pi * (np.asarray(i) + x) - 0.25 * np.pi * (np.asarray(a) - b) + np.arcsin(np.sqrt(p_e))
    return np.cos(angle) ** 2


def _beamsplit_grad(i, x, a, b, p_e):
    """d p_bs / d p_e = -cos2φ0 - sin2φ0·(1-2p)/(2√(p(1-p)))，φ0 不含失准项"""
    phi0 = 0.5 * np.pi * (np.asarray(i) + x) - 0.25 * np.pi * (np.asarray(a) - b)
    sin2 = np.sin(2.0 * phi0)
    sin2 = np.where(np.abs(sin2) < 1e-12, 0.0, sin2)
    if p_e <= 0.0 and np.any(sin2 != 0.0):
        # 基不匹配时 p_e=0 处单侧导数为无穷
        raise DomainError("失准概率为0时基不匹配的分束概率对 p_e 不可导")
    root = math.sqrt(p_e * (1.0 - p_e))
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(sin2 == 0.0, 0.0, sin2 * (1.0 - 2.0 * p_e) / (2.0 * root))
    return -np.cos(2.0 * phi0) - skew


def adjusted_params(theta, ctx, i):
    """
    按截获标志调整后的 (λ̂, p̂_c, k̂)

    Args:
        theta (SystemParams): 系统参数
        ctx (PulseContext): 脉冲条件
        i (int): 探测器下标

    Returns:
        tuple: (λ̂, p̂_c, k̂)
    """
    lam = theta.alice.intensities[ctx.lambda_index]
    lam_hat = lam * theta.alice.channel_eff ** (1 - ctx.e) * theta.eve_path_eff**ctx.e
    p_bs = float(beamsplit_prob(i, ctx.x, ctx.a, ctx.b, theta.bob.misalignment))
    pc_hat = p_bs * theta.bob.efficiency[i] * theta.eve.channel_eff**ctx.e
    return lam_hat, pc_hat, ctx.e * theta.eve.photons_per_pulse


def _channel_sensitivities(theta, lam_hat, e, name):
    """λ̂ 对扁平参数的导数"""
    alpha = theta.alice.attenuation
    if name == "attenuation":
        return -LN10_OVER_10 * lam_hat * ((1.0 - e) * theta.alice.distance_ab + e * theta.eve.distance_ae)
    if name == "distance_ab":
        return -LN10_OVER_10 * alpha * lam_hat * (1.0 - e)
    if name == "distance_ae":
        return -LN10_OVER_10 * alpha * lam_hat * e
    return None


def _outcome_cells(theta, a, b, x, e, lam, names=()):
    """
    向量化计算联合结果 (00, 01, 10, 11) 及其梯度

    Args:
        theta (SystemParams): 系统参数
        a, b, x, e (array): 可广播的比特数组
        lam (array): 强度数组（与比特数组可广播）
        names (Iterable[str]): 需要梯度的扁平参数名

    Returns:
        tuple: (cells[..., 4], {name: dcells[..., 4]})
    """
    a, b, x, e, lam = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, x, e, lam)))
    bob, eve = theta.bob, theta.eve
    p_c = np.asarray(bob.efficiency)
    p_d = np.asarray(bob.dark_count)
    p_e = bob.misalignment

    lam_hat = lam * theta.alice.channel_eff ** (1.0 - e) * theta.eve_path_eff**e
    k_hat = e * eve.photons_per_pulse
    eb = eve.channel_eff**e
    pbs = [beamsplit_prob(i, x, a, b, p_e) for i in (0, 1)]
    pc_hat = [pbs[i] * p_c[i] * eb for i in (0, 1)]
    pc_union = eb * (pbs[1] * p_c[1] + pbs[0] * p_c[0])
    pd_union = 1.0 - (1.0 - p_d[0]) * (1.0 - p_d[1])

    names = tuple(names)
    need = set()
    if names:
        need = {"lam", "p_c", "p_d"}
        if "photons_per_pulse" in names:
            need.add("k")
    marginal = [pns_click_prob(lam_hat, pc_hat[i], p_d[i], k_hat, gradient=need) for i in (0, 1)]
    union = pns_click_prob(lam_hat, pc_union, pd_union, k_hat, gradient=need)

    d0, d1, u = marginal[0].value, marginal[1].value, union.value
    cells = np.stack([1.0 - u, u - d1, u - d0, d0 + d1 - u], axis=-1)
    cells = _clamp_cells(cells)

    grads = {}
    if names:
        dpbs = [_beamsplit_grad(i, x, a, b, p_e) for i in (0, 1)] if "misalignment" in names else None
        for name in names:
            dlam = _channel_sensitivities(theta, lam_hat, e, name)
            dlam = np.zeros_like(lam) if dlam is None else dlam
            dpc = [np.zeros_like(lam), np.zeros_like(lam)]
            dpd = [0.0, 0.0]
            dpc_union = np.zeros_like(lam)
            dpd_union = 0.0
            dk = np.zeros_like(lam)
            if name.startswith("efficiency_"):
                j = int(name[-1])
                dpc[j] = pbs[j] * eb
                dpc_union = pbs[j] * eb
            elif name.startswith("dark_count_"):
                j = int(name[-1])
                dpd[j] = 1.0
                dpd_union = 1.0 - p_d[1 - j]
            elif name == "misalignment":
                dpc = [dpbs[i] * p_c[i] * eb for i in (0, 1)]
                dpc_union = eb * (dpbs[1] * p_c[1] + dpbs[0] * p_c[0])
            elif name == "channel_eff":
                # d(p_EB^e)/dp_EB 在 e∈{0,1} 时等于 e
                dpc = [pbs[i] * p_c[i] * e for i in (0, 1)]
                dpc_union = e * (pbs[1] * p_c[1] + pbs[0] * p_c[0])
            elif name == "photons_per_pulse":
                dk = e

            def _total(click, dpc_value, dpd_value):
                g = click.gradient
                total = g["lam"] * dlam + g["p_c"] * dpc_value + g["p_d"] * dpd_value
                if "k" in g:
                    total = total + g["k"] * dk
                return np.asarray(total, dtype=float)

            g0 = _total(marginal[0], dpc[0], dpd[0])
            g1 = _total(marginal[1], dpc[1], dpd[1])
            gu = _total(union, dpc_union, dpd_union)
            grads[name] = np.stack([-gu, gu - g1, gu - g0, g0 + g1 - gu], axis=-1)
    return cells, grads


def _clamp_cells(cells):
    lowest = np.min(cells)
    if lowest < -NEGATIVE_CELL_TOLERANCE:
        raise ModelConsistencyError(f"联合概率重构出现负值: {lowest:.3e}")
    if lowest < 0.0:
        cells = np.clip(cells, 0.0, None)
        cells = cells / cells.sum(axis=-1, keepdims=True)
    return cells


def joint_outcome_probs(theta, ctx):
    """
    单个脉冲条件下的联合结果概率

    Args:
        theta (SystemParams): 系统参数
        ctx (PulseContext): 脉冲条件

    Returns:
        numpy.ndarray: 长度为4的向量，顺序为 00, 01, 10, 11
    """
    if ctx.lambda_index >= theta.alice.n_lambda:
        raise DomainError("强度下标超出范围")
    lam = theta.alice.intensities[ctx.lambda_index]
    cells, _ = _outcome_cells(theta, ctx.a, ctx.b, ctx.x, ctx.e, lam)
    return cells


def conditional_outcome_probs(theta, names=(), resolve_bit=False):
    """
    给定 (m, λ) 的结果条件概率，已对 x（以及 resolve_bit=False 时）与 e 边缘化
    采用代表基 b=1、a=m

    Args:
        theta (SystemParams): 系统参数
        names (Iterable[str]): 需要梯度的扁平参数名（可含 intercept_fraction）
        resolve_bit (bool): 为True时保留数据比特 x 维度

    Returns:
        tuple: (probs, grads)，probs 形状为 (2, N_λ, 4) 或 (2, 2, N_λ, 4)
    """
    names = tuple(names)
    lam = np.asarray(theta.alice.intensities)
    m = np.arange(2).reshape(2, 1, 1, 1)
    x = np.arange(2).reshape(1, 2, 1, 1)
    e = np.arange(2).reshape(1, 1, 2, 1)
    inner = tuple(n for n in names if n != "intercept_fraction")
    cells, grads = _outcome_cells(theta, m, 1, x, e, lam.reshape(1, 1, 1, -1), inner)

    delta = theta.eve.intercept_fraction
    w_e = np.array([1.0 - delta, delta]).reshape(1, 1, 2, 1, 1)
    x_weight = 1.0 if resolve_bit else 0.5

    def _mix(arr):
        mixed = (arr * w_e).sum(axis=2)
        return mixed if resolve_bit else x_weight * mixed.sum(axis=1)

    probs = _mix(cells)
    out_grads = {name: _mix(g) for name, g in grads.items()}
    if "intercept_fraction" in names:
        diff = cells[:, :, 1] - cells[:, :, 0]
        out_grads["intercept_fraction"] = diff if resolve_bit else x_weight * diff.sum(axis=1)
    return probs, out_grads


def _to_vector(per_mode, n_lambda):
    # (2, N, 4) -> m 主序、结果、强度；乘以 P(m)=1/2 与 P(λ)=1/N_λ
    return (0.5 / n_lambda) * np.transpose(per_mode, (0, 2, 1)).reshape(-1)


def iid_prob_vector(theta, gradient_names: Iterable[str] = ()):
    """
    i.i.d. 假设下的 8·N_λ 单元观测概率向量

    Args:
        theta (SystemParams): 系统参数
        gradient_names (Iterable[str]): 需要梯度的扁平参数名

    Returns:
        OutcomeProbs: 概率向量（及梯度）
    """
    n_lambda = theta.alice.n_lambda
    probs, grads = conditional_outcome_probs(theta, gradient_names)
    cells = _to_vector(probs, n_lambda)
    gradient = {name: _to_vector(g, n_lambda) for name, g in grads.items()}
    for name in gradient_names:
        gradient.setdefault(name, np.zeros_like(cells))
    return OutcomeProbs(cells=cells, n_lambda=n_lambda, gradient=gradient)


def outcome_distribution(theta, a, b, lambda_index):
    """给定 (a, b, λ) 对 x、e 边缘化后的结果分布，用于检验基对称性"""
    delta = theta.eve.intercept_fraction
    lam = theta.alice.intensities[lambda_index]
    x = np.arange(2).reshape(2, 1)
    e = np.arange(2).reshape(1, 2)
    cells, _ = _outcome_cells(theta, a, b, x, e, lam)
    w = 0.5 * np.array([1.0 - delta, delta]).reshape(1, 2, 1)
    return (cells * w).sum(axis=(0, 1))


def _gain_error_from_bits(per_bit, mode):
    """
    由按比特分解的结果概率计算 Q 与 EQ

    Args:
        per_bit (array): 形状 (2[x], ..., 4)
        mode (DoubleClickMode): 双击计数约定

    Returns:
        tuple: (Q, EQ)
    """
    mode = DoubleClickMode(mode)
    x0, x1 = per_bit[0], per_bit[1]
    Q = 0.5 * (x0[..., 1] + x0[..., 2] + x1[..., 1] + x1[..., 2])
    EQ = 0.5 * (x0[..., 2] + x1[..., 1])
    double = 0.5 * (x0[..., 3] + x1[..., 3])
    if mode is DoubleClickMode.COUNT_AS_GAIN_AND_ERROR:
        Q, EQ = Q + double, EQ + double
    elif mode is DoubleClickMode.HALF_ERROR:
        Q, EQ = Q + double, EQ + 0.5 * double
    return Q, EQ


def gain_error_table(theta, mode=DoubleClickMode.EXCLUSIVE, model="iid"):
    """
    所有 (m, λ) 的增益与误码增益

    Args:
        theta (SystemParams): 系统参数
        mode (DoubleClickMode): 双击计数约定
        model (str): iid 或 hmm

    Returns:
        tuple: (Q, EQ)，形状均为 (2, N_λ)
    """
    if model == "hmm":
        from src.models.hmm import bit_resolved_probs

        per_bit = bit_resolved_probs(theta)
    else:
        per_bit, _ = conditional_outcome_probs(theta, resolve_bit=True)
    # per_bit: (m, x, λ, 4) -> (x, m, λ, 4)
    return _gain_error_from_bits(np.swapaxes(per_bit, 0, 1), mode)


def gain_error_stats(theta, m, lambda_index, mode=DoubleClickMode.EXCLUSIVE, model="iid"):
    """
    给定 (m, λ) 的增益/误码统计

    Args:
        theta (SystemParams): 系统参数
        m (int): 基匹配标志
        lambda_index (int): 强度下标
        mode (DoubleClickMode): 双击计数约定
        model (str): iid 或 hmm

    Returns:
        GainErrorStats: Q、EQ 与 δ（Q=0 时 δ 为 None）
    """
    Q, EQ = gain_error_table(theta, mode, model)
    q, eq = float(Q[m, lambda_index]), float(EQ[m, lambda_index])
    return GainErrorStats(Q=q, EQ=eq, delta=eq / q if q > 0 else None)


def error_rate_interval(theta, m, lambda_index, pulses, mode=DoubleClickMode.EXCLUSIVE, model="iid"):
    """
    会话误码率的Beta近似

    Args:
        theta (SystemParams): 系统参数
        m (int): 基匹配标志
        lambda_index (int): 强度下标
        pulses (int): 会话脉冲数 N
        mode (DoubleClickMode): 双击计数约定
        model (str): iid 或 hmm

    Returns:
        ErrorRateApprox: 误码率近似分布
    """
    stats_ = gain_error_stats(theta, m, lambda_index, mode, model)
    if stats_.delta is None:
        raise DomainError("增益为0，误码率无定义")
    delta = stats_.delta
    expected_gains = pulses * stats_.Q * 0.5 / theta.alice.n_lambda
    variance = delta * (1.0 - delta) / expected_gains
    if delta in (0.0, 1.0):
        return ErrorRateApprox(alpha=None, beta=None, mean=delta, variance=0.0)
    alpha, beta = moment_match_beta(delta, variance)
    return ErrorRateApprox(alpha=alpha, beta=beta, mean=delta, variance=variance)


def matched_click_prob(theta, lam, intercept):
    """
    基匹配时至少一个探测器点击的概率（对 x 平均）

    Args:
        theta (SystemParams): 系统参数
        lam (float): 强度
        intercept (bool): 是否处于Eve截获分支

    Returns:
        float: 点击概率
    """
    cells, _ = _outcome_cells(theta, 1, 1, np.arange(2), float(intercept), lam)
    return float(0.5 * (1.0 - cells[:, 0]).sum())


def single_click_prob(theta, lam, intercept=False):
    """单点击概率 Σ_m (P^01 + P^10)，对 x 平均"""
    m = np.arange(2).reshape(2, 1)
    x = np.arange(2).reshape(1, 2)
    cells, _ = _outcome_cells(theta, m, 1, x, float(intercept), lam)
    return float(0.5 * (cells[..., 1] + cells[..., 2]).sum())


def optimize_eve_channel(theta):
    """
    选择 p_EB 使最大强度下截获分支与正常分支的单点击增益相等（伪装准则）

    Args:
        theta (SystemParams): 系统参数（Eve的 p_EB 将被替换）

    Returns:
        float: 优化后的 p_EB
    """
    lam_top = max(theta.alice.intensities)
    target = single_click_prob(theta, lam_top, intercept=False)

    def gap(p_eb):
        return single_click_prob(theta.with_values({"channel_eff": p_eb}), lam_top, intercept=True) - target

    if gap(1.0) < 0:
        logger.warning("即使 p_EB=1，Eve也无法补偿增益，p_EB取1")
        return 1.0
    if gap(0.0) > 0:
        return 0.0
    value = optimize.bisect(gap, 0.0, 1.0, xtol=1e-14, maxiter=200)
    logger.info("Eve的最优信道效率 p_EB=%.6f", value)
    return float(value)


if __name__ == "__main__":
    from src.models.params import AliceParams, BobParams, EveParams, SystemParams

    theta = SystemParams(
        alice=AliceParams(intensities=(0.48, 5.0), attenuation=0.21, distance_ab=50.0),
        bob=BobParams(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033),
        eve=EveParams(distance_ae=10.0, channel_eff=0.5, photons_per_pulse=3.0, intercept_fraction=0.2),
    )
    theta = theta.with_values({"channel_eff": optimize_eve_channel(theta)})
    probs = iid_prob_vector(theta)
    print(probs.to_frame())
    print("概率和:", probs.cells.sum())
    for lam_index in range(theta.alice.n_lambda):
        s = gain_error_stats(theta, 1, lam_index)
        print(f"λ下标{lam_index}: Q={s.Q:.6e}, δ={s.delta:.6f}")
