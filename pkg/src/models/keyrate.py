#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
密钥率模块 - 负责GLLP密钥率（本方案）、弱+真空诱骗态密钥率（原始与修正的增益模型）、
后验密钥率分布以及距离扫描曲线
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special
from tqdm import tqdm

from src.models.detection import DoubleClickMode, gain_error_table
from src.utils.errors import DomainError

logger = logging.getLogger(__name__)

PROTOCOLS = ("proposed", "decoy_original", "decoy_corrected")
DEFAULT_SWEEP_INTENSITIES = (0.48, 1.0, 5.0, 10.0)

# 原始诱骗态模型中暗计数的误码率
_DARK_ERROR_RATE = 0.5


class KeyRateConfig(BaseModel):
    """密钥率计算参数：协议效率 q、纠错效率 f、双击计数约定"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    protocol_eff: float = Field(default=0.5, gt=0.0, le=1.0)
    ec_efficiency: float = Field(default=1.22, ge=1.0)
    double_click_mode: DoubleClickMode = DoubleClickMode.EXCLUSIVE


class DecoyConfig(BaseModel):
    """弱+真空诱骗态强度"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mu: float = 0.48
    nu1: float = 0.05
    nu2: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if not self.mu > self.nu1 > self.nu2 >= 0.0:
            raise ValueError("需要满足 mu > nu1 > nu2 >= 0")
        if self.nu1 + self.nu2 >= self.mu:
            raise ValueError("需要满足 nu1 + nu2 < mu")
        return self


@dataclass(frozen=True)
class KeyRateResult:
    """
    密钥率结果（逐强度）

    Attributes:
        K: 密钥率（比特/脉冲），非负
        Q: 使用的增益
        delta: 使用的误码率
        Delta: 使用的截获比例
        diagnostic: 退化估计的说明
    """

    K: np.ndarray
    Q: np.ndarray
    delta: np.ndarray
    Delta: np.ndarray
    diagnostic: Optional[str] = None


@dataclass(frozen=True)
class DecoyEstimate:
    """诱骗态中间量"""

    Y0: float
    Y1: float
    Q1: float
    e1: float


def binary_entropy(x):
    """
    二元香农熵 H₂(x)，H₂(0)=H₂(1)=0

    Args:
        x (float or array): 概率

    Returns:
        float or array: 熵（比特）
    """
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise DomainError("熵函数的参数必须位于[0,1]")
    value = (special.entr(x) + special.entr(1.0 - x)) / math.log(2.0)
    return value if value.ndim else float(value)


def gllp_rate(Q, delta, Delta, cfg: KeyRateConfig = KeyRateConfig()) -> KeyRateResult:
    """
    本方案的GLLP密钥率
    K = max(0, q·Q·[-f·H₂(δ) + (1-Δ)(1 - H₂(δ/(1-Δ)))])，δ/(1-Δ) > 1 时为0

    Args:
        Q (float or array): 增益
        delta (float or array): 误码率
        Delta (float or array): 截获（标记）比例
        cfg (KeyRateConfig): 密钥率参数

    Returns:
        KeyRateResult: 密钥率
    """
    Q, delta, Delta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (Q, delta, Delta)))
    if np.any((delta < 0) | (delta > 1)):
        raise DomainError("误码率必须位于[0,1]")
    if np.any((Delta < 0) | (Delta >= 1)):
        raise DomainError("截获比例必须位于[0,1)")
    ratio = delta / (1.0 - Delta)
    valid = ratio <= 1.0
    bracket = -cfg.ec_efficiency * binary_entropy(delta) + (1.0 - Delta) * (
        1.0 - binary_entropy(np.minimum(ratio, 1.0))
    )
    K = np.where(valid, np.maximum(0.0, cfg.protocol_eff * Q * bracket), 0.0)
    return KeyRateResult(K=K, Q=Q, delta=delta, Delta=Delta)


def decoy_intermediates(gains, error_gains, dcfg: DecoyConfig = DecoyConfig()) -> DecoyEstimate:
    """
    诱骗态的 Y0、Y1、Q1、e1

    Args:
        gains (tuple): (Q_μ, Q_ν1, Q_ν2)
        error_gains (tuple): (EQ_μ, EQ_ν1, EQ_ν2)
        dcfg (DecoyConfig): 强度设置

    Returns:
        DecoyEstimate: 中间量
    """
    mu, nu1, nu2 = dcfg.mu, dcfg.nu1, dcfg.nu2
    q_mu, q_nu1, q_nu2 = gains
    _, eq_nu1, eq_nu2 = error_gains
    y0 = max((nu1 * q_nu2 * math.exp(nu2) - nu2 * q_nu1 * math.exp(nu1)) / (nu1 - nu2), 0.0)
    y1 = (mu / (mu * nu1 - mu * nu2 - nu1**2 + nu2**2)) * (
        q_nu1 * math.exp(nu1) - q_nu2 * math.exp(nu2) - (nu1**2 - nu2**2) * (q_mu * math.exp(mu) - y0) / mu**2
    )
    q1 = y1 * mu * math.exp(-mu)
    e1 = (eq_nu1 * math.exp(nu1) - eq_nu2 * math.exp(nu2)) / (y1 * (nu1 - nu2)) if y1 != 0 else math.nan
    return DecoyEstimate(Y0=y0, Y1=y1, Q1=q1, e1=e1)


def decoy_rate(gains, error_gains, cfg: KeyRateConfig = KeyRateConfig(), dcfg: DecoyConfig = DecoyConfig()):
    """
    弱+真空诱骗态密钥率 K = max(0, q[-Q_μ f H₂(δ_μ) + Q1(1 - H₂(e1))])
    Y1 <= 0 或 e1 不在[0,1]时视为退化估计，密钥率为0

    Args:
        gains (tuple): (Q_μ, Q_ν1, Q_ν2)
        error_gains (tuple): (EQ_μ, EQ_ν1, EQ_ν2)
        cfg (KeyRateConfig): 密钥率参数
        dcfg (DecoyConfig): 强度设置

    Returns:
        tuple: (KeyRateResult, DecoyEstimate)
    """
    for v in (*gains, *error_gains):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"增益与误码增益必须位于[0,1]: {v}")
    estimate = decoy_intermediates(gains, error_gains, dcfg)
    q_mu, eq_mu = gains[0], error_gains[0]
    delta_mu = eq_mu / q_mu if q_mu > 0 else 0.0

    def _result(K, diagnostic=None):
        return KeyRateResult(
            K=np.asarray(K), Q=np.asarray(q_mu), delta=np.asarray(delta_mu), Delta=np.asarray(0.0), diagnostic=diagnostic
        )

    if not estimate.Y1 > 0:
        return _result(0.0, f"单光子产额估计非正: Y1={estimate.Y1:.3e}"), estimate
    if not 0.0 <= estimate.e1 <= 1.0:
        return _result(0.0, f"单光子误码率估计越界: e1={estimate.e1:.3e}"), estimate
    bracket = -q_mu * cfg.ec_efficiency * binary_entropy(min(delta_mu, 1.0)) + estimate.Q1 * (
        1.0 - binary_entropy(estimate.e1)
    )
    return _result(max(0.0, cfg.protocol_eff * bracket)), estimate


def decoy_gain_error(theta, mu, corrected=True):
    """
    诱骗态比较所用的增益与误码增益（基匹配、无Eve、对称探测器）
    修正：Q = 1-(1-p_d)²e^{-μ p_AB p_c}，EQ = 1-(1-p_d)e^{-μ p_AB p_c p_e}
    原始：Q = p_d + 1 - e^{-μ p_AB p_c}，EQ = e₀p_d + p_e(1 - e^{-μ p_AB p_c})，e₀ = 1/2

    Args:
        theta (SystemParams): 系统参数（探测器必须对称）
        mu (float): 强度
        corrected (bool): 是否使用修正后的表达式

    Returns:
        tuple: (Q_μ, EQ_μ)
    """
    bob = theta.bob
    if bob.efficiency[0] != bob.efficiency[1] or bob.dark_count[0] != bob.dark_count[1]:
        raise DomainError("诱骗态增益模型要求两个探测器参数相同")
    if mu < 0:
        raise DomainError("强度不能为负")
    p_c, p_d, p_e = bob.efficiency[0], bob.dark_count[0], bob.misalignment
    exposure = mu * theta.alice.channel_eff * p_c
    if corrected:
        return 1.0 - (1.0 - p_d) ** 2 * math.exp(-exposure), 1.0 - (1.0 - p_d) * math.exp(-exposure * p_e)
    return p_d - math.expm1(-exposure), _DARK_ERROR_RATE * p_d - p_e * math.expm1(-exposure)


def keyrate_at(theta, cfg: KeyRateConfig = KeyRateConfig(), model="iid", Delta=None) -> KeyRateResult:
    """
    给定参数下各强度的密钥率（基匹配的增益与误码率）

    Args:
        theta (SystemParams): 系统参数
        cfg (KeyRateConfig): 密钥率参数
        model (str): iid 或 hmm
        Delta (float): 截获比例，缺省取 theta 中的值

    Returns:
        KeyRateResult: 逐强度的密钥率
    """
    Q, EQ = gain_error_table(theta, cfg.double_click_mode, model)
    q, eq = Q[1], EQ[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(q > 0, eq / q, 0.0)
    Delta = theta.eve.intercept_fraction if Delta is None else Delta
    # 截获比例为1时没有可用的单光子比例
    return gllp_rate(q, np.clip(delta, 0.0, 1.0), min(Delta, np.nextafter(1.0, 0.0)), cfg)


def keyrate_posterior(chain, theta_fixed, cfg: KeyRateConfig = KeyRateConfig(), model="iid", thin=1, progress=False):
    """
    将后验样本逐一变换为各强度的密钥率样本

    Args:
        chain (Chain): 后验链（自然空间）
        theta_fixed (SystemParams): 固定参数
        cfg (KeyRateConfig): 密钥率参数
        model (str): 与推断一致的模型（iid 或 hmm）
        thin (int): 抽稀间隔
        progress (bool): 是否显示进度条

    Returns:
        pandas.DataFrame: 列为 lambda_index, sample_index, K
    """
    if len(chain) == 0:
        raise DomainError("空链无法计算密钥率")
    indices = np.arange(0, len(chain), max(int(thin), 1))
    n_lambda = theta_fixed.alice.n_lambda
    rates = np.empty((len(indices), n_lambda))
    for row, i in enumerate(tqdm(indices, desc="密钥率", unit="样本", disable=not progress)):
        theta = theta_fixed.with_values(dict(zip(chain.names, chain.values[i])))
        rates[row] = keyrate_at(theta, cfg, model).K
    lam_idx, sample_idx = np.meshgrid(np.arange(n_lambda), indices, indexing="ij")
    return pd.DataFrame({"lambda_index": lam_idx.ravel(), "sample_index": sample_idx.ravel(), "K": rates.T.ravel()})


def keyrate_summary(frame, truth=None):
    """
    每个强度的密钥率汇总（均值、标准差、99%区间，以及是否覆盖真值）

    Args:
        frame (pandas.DataFrame): keyrate_posterior 的输出
        truth (array): 各强度的真值密钥率（可选）

    Returns:
        pandas.DataFrame: 汇总表
    """
    grouped = frame.groupby("lambda_index")["K"]
    summary = pd.DataFrame(
        {
            "mean": grouped.mean(),
            "sd": grouped.std(ddof=1).fillna(0.0),
            "ci99_low": grouped.quantile(0.005),
            "median": grouped.quantile(0.5),
            "ci99_high": grouped.quantile(0.995),
        }
    ).reset_index()
    if truth is not None:
        summary["truth"] = np.asarray(truth)
        summary["covered"] = (summary["ci99_low"] <= summary["truth"]) & (summary["truth"] <= summary["ci99_high"])
    return summary


def parse_distances(text):
    """
    解析 start:step:stop（单位km，含端点）

    Args:
        text (str): 例如 "0:5:150"

    Returns:
        numpy.ndarray: 距离数组
    """
    try:
        start, step, stop = (float(v) for v in text.split(":"))
    except ValueError:
        raise DomainError(f"距离格式应为 start:step:stop，收到 {text!r}") from None
    if step <= 0 or stop < start or start < 0:
        raise DomainError(f"无效的距离范围: {text}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _symmetrized(theta):
    bob = theta.bob
    pairs = {
        "efficiency": bob.efficiency,
        "dark_count": bob.dark_count,
        "afterpulse": bob.afterpulse,
    }
    if all(p[0] == p[1] for p in pairs.values()):
        return theta
    logger.info("诱骗态比较要求对称探测器，取两探测器参数的平均值")
    update = {k: (0.5 * (p[0] + p[1]),) * 2 for k, p in pairs.items()}
    return theta.model_copy(update={"bob": bob.model_copy(update=update)})


def distance_sweep(
    theta,
    distances,
    intensities=DEFAULT_SWEEP_INTENSITIES,
    cfg: KeyRateConfig = KeyRateConfig(),
    dcfg: DecoyConfig = DecoyConfig(),
    model="iid",
    progress=False,
):
    """
    按距离扫描密钥率：本方案（若干强度，Δ=0）与诱骗态（原始与修正）

    Args:
        theta (SystemParams): 系统参数（距离与Eve参数将被覆盖）
        distances (array): 距离（km）
        intensities (tuple): 本方案使用的强度
        cfg (KeyRateConfig): 密钥率参数（只使用 q 与 f，双击约定固定为 count_as_gain_and_error）
        dcfg (DecoyConfig): 诱骗态强度
        model (str): 本方案的模型（iid 或 hmm）
        progress (bool): 是否显示进度条

    Returns:
        tuple: (密钥率表 distance_km,protocol,intensity,K ; 增益误码表 distance_km,protocol,intensity,Q,delta)
    """
    base = _symmetrized(theta.without_eve())
    # 两种协议都把双击同时计为增益与误码，与配置中的约定无关
    comparison_cfg = cfg.model_copy(update={"double_click_mode": DoubleClickMode.COUNT_AS_GAIN_AND_ERROR})
    rates, curves = [], []
    for distance in tqdm(distances, desc="距离扫描", unit="点", disable=not progress):
        at_distance = base.with_values(
            {"distance_ab": float(distance), "distance_ae": min(base.eve.distance_ae, float(distance))}
        )
        for mu in intensities:
            result = keyrate_at(at_distance.with_intensities([mu]), comparison_cfg, model, Delta=0.0)
            rates.append((distance, "proposed", mu, float(result.K[0])))
            curves.append((distance, "proposed", mu, float(result.Q[0]), float(result.delta[0])))
        for protocol, corrected in (("decoy_original", False), ("decoy_corrected", True)):
            gains, error_gains = zip(*(decoy_gain_error(at_distance, v, corrected) for v in (dcfg.mu, dcfg.nu1, dcfg.nu2)))
            result, estimate = decoy_rate(gains, error_gains, comparison_cfg, dcfg)
            if result.diagnostic:
                logger.debug("%s @ %.1f km: %s", protocol, distance, result.diagnostic)
            rates.append((distance, protocol, dcfg.mu, float(result.K)))
            curves.append((distance, protocol, dcfg.mu, float(result.Q), float(result.delta)))
    rate_frame = pd.DataFrame(rates, columns=["distance_km", "protocol", "intensity", "K"])
    curve_frame = pd.DataFrame(curves, columns=["distance_km", "protocol", "intensity", "Q", "delta"])
    return rate_frame, curve_frame


def max_positive_distance(rate_frame, protocol, intensity):
    """某条曲线上密钥率为正的最大距离（没有正值时返回None）"""
    rows = rate_frame[
        (rate_frame["protocol"] == protocol) & np.isclose(rate_frame["intensity"], intensity) & (rate_frame["K"] > 0)
    ]
    return float(rows["distance_km"].max()) if len(rows) else None


if __name__ == "__main__":
    from src.models.params import AliceParams, BobParams, SystemParams

    theta = SystemParams(
        alice=AliceParams(intensities=(0.48,), attenuation=0.21, distance_ab=50.0),
        bob=BobParams(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033),
    )
    rates, _ = distance_sweep(theta, parse_distances("0:10:150"))
    print(rates.pivot_table(index="distance_km", columns=["protocol", "intensity"], values="K"))
    for protocol, mu in (("decoy_original", 0.48), ("proposed", 0.48), ("proposed", 10.0)):
        print(protocol, mu, "最大正密钥率距离:", max_positive_distance(rates, protocol, mu))
