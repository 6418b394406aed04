#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
光子统计模块 - 单个器件组合的闭式点击概率（探测器、光纤、分束器、激光源、PNS截获）及其参数导数
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict

import numpy as np
from scipy import integrate, special

from src.utils.errors import DomainError

# hyp1f1(1, k+1, x) 在 x 不超过此值时直接使用，超过后改用正则化不完全Gamma
_KUMMER_LIMIT = 50.0

GRADIENT_KEYS = ("lam", "p_c", "p_d", "k")


@dataclass(frozen=True)
class ClickProb:
    """
    点击概率（伯努利参数）

    Attributes:
        value: 点击概率，标量或与输入广播后的数组
        log_complement: log(1 - value)，在概率接近1时保持精度
        gradient: 参数名到偏导数的映射（lam, p_c, p_d, k）
    """

    value: np.ndarray
    log_complement: np.ndarray
    gradient: Dict[str, np.ndarray] = field(default_factory=dict)


def _check_probability(name, value):
    arr = np.asarray(value, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)) or np.any(np.isnan(arr)):
        raise DomainError(f"{name} 必须位于[0,1]区间")
    return arr


def _check_nonnegative(name, value):
    arr = np.asarray(value, dtype=float)
    if np.any(arr < 0.0) or np.any(np.isnan(arr)):
        raise DomainError(f"{name} 不能为负数")
    return arr


def _finish(value):
    value = np.asarray(value, dtype=float)
    return value if value.ndim else float(value)


def reg_gamma_upper(s, x):
    """
    上正则化不完全Gamma函数 Γ̄(s, x)，约定 Γ̄(0, x) = 0

    Args:
        s (float or array): 形状参数，s >= 0
        x (float or array): 积分下限，x >= 0

    Returns:
        float or array: Γ̄(s, x) ∈ [0, 1]
    """
    s = _check_nonnegative("s", s)
    x = _check_nonnegative("x", x)
    s_safe = np.where(s > 0, s, 1.0)
    return _finish(np.where(s > 0, special.gammaincc(s_safe, x), 0.0))


def reg_gamma_lower(s, x):
    """下正则化不完全Gamma函数 γ̄(s, x) = 1 - Γ̄(s, x)"""
    s = _check_nonnegative("s", s)
    x = _check_nonnegative("x", x)
    s_safe = np.where(s > 0, s, 1.0)
    return _finish(np.where(s > 0, special.gammainc(s_safe, x), 1.0))


def _scaled_lower_gamma(k, c, lam):
    """
    I(k, c, λ) = ∫_0^λ u^{k-1} e^{-c u} du / Γ(k) = c^{-k} γ̄(k, cλ)
    c → 0 时连续地趋于 λ^k / Γ(k+1)；k = 0 时取1
    """
    k, c, lam = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (k, c, lam)))
    x = c * lam
    k_safe = np.where(k > 0, k, 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        log_lam = np.log(lam)
        kummer = np.exp(k_safe * log_lam - special.gammaln(k_safe + 1.0) - x) * special.hyp1f1(
            1.0, k_safe + 1.0, np.minimum(x, _KUMMER_LIMIT)
        )
        c_safe = np.where(c > 0, c, 1.0)
        direct = np.exp(-k_safe * np.log(c_safe)) * special.gammainc(k_safe, x)
    value = np.where(x <= _KUMMER_LIMIT, kummer, direct)
    value = np.where(lam > 0, value, 0.0)
    return np.where(k > 0, value, 1.0)


@lru_cache(maxsize=65536)
def _log_weighted_integral(k, x):
    """∫_0^1 s^{k-1} ln(s) e^{-x s} ds，k > 0"""
    value, _ = integrate.quad(lambda s: np.exp(-x * s), 0.0, 1.0, weight="alg-loga", wvar=(k - 1.0, 0.0))
    return value


def _d_scaled_lower_gamma_dk(k, c, lam):
    """
    ∂I/∂k = (ln λ - ψ(k)) I + λ^k/Γ(k) ∫_0^1 s^{k-1} ln(s) e^{-cλs} ds
    仅对 k > 0 且 λ > 0 的元素有效，其余位置为0
    """
    k, c, lam = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (k, c, lam)))
    out = np.zeros(k.shape)
    mask = (k > 0) & (lam > 0)
    if not np.any(mask):
        return out
    km, cm, lm = k[mask], c[mask], lam[mask]
    integral = np.array([_log_weighted_integral(float(a), float(b)) for a, b in zip(km, cm * lm)])
    prefactor = np.exp(km * np.log(lm) - special.gammaln(km))
    base = _scaled_lower_gamma(km, cm, lm)
    out[mask] = (np.log(lm) - special.digamma(km)) * base + prefactor * integral
    return out


def _wanted(gradient):
    if gradient is True:
        return set(GRADIENT_KEYS)
    if not gradient:
        return set()
    return set(gradient)


def click_prob_detector(n, p_c, p_d, gradient=False):
    """
    n 个光子入射时探测器点击概率 1 - q_d·q_c^n

    Args:
        n (int or array): 光子数
        p_c (float): 探测效率
        p_d (float): 暗计数概率
        gradient (bool): 是否返回对 p_c、p_d 的导数

    Returns:
        ClickProb: 点击概率
    """
    n = np.asarray(n)
    if np.any(n < 0) or not np.issubdtype(n.dtype, np.integer):
        raise DomainError("光子数必须为非负整数")
    p_c = _check_probability("p_c", p_c)
    p_d = _check_probability("p_d", p_d)
    miss = (1.0 - p_c) ** n
    value = 1.0 - (1.0 - p_d) * miss
    grads = {}
    if gradient:
        with np.errstate(divide="ignore", invalid="ignore"):
            grads["p_c"] = _finish(np.where(n > 0, (1.0 - p_d) * n * (1.0 - p_c) ** np.maximum(n - 1, 0), 0.0))
        grads["p_d"] = _finish(miss)
    with np.errstate(divide="ignore"):
        log_comp = np.log1p(-p_d) + n * np.log1p(-p_c)
    return ClickProb(_finish(value), _finish(log_comp), grads)


def effective_efficiency(p_f, p_i, p_c):
    """
    光纤 -> 分束器 -> 探测器 的等效探测效率

    Args:
        p_f (float): 光纤透过率
        p_i (float): 分束器到达概率
        p_c (float): 探测效率

    Returns:
        float: p_f·p_i·p_c
    """
    for name, v in (("p_f", p_f), ("p_i", p_i), ("p_c", p_c)):
        _check_probability(name, v)
    return _finish(np.asarray(p_f, dtype=float) * p_i * p_c)


def effective_intensity(lam, p_f):
    """泊松光源经过透过率为 p_f 的光纤后的强度 λ·p_f"""
    lam = _check_nonnegative("lam", lam)
    _check_probability("p_f", p_f)
    return _finish(lam * p_f)


def pair_union_params(p_0, p_c0, p_c1, p_d0, p_d1):
    """
    两个探测器"至少一个点击"等效为单个伪探测器

    Args:
        p_0 (float): 光子到达探测器0的概率
        p_c0, p_c1 (float): 两个探测器的效率
        p_d0, p_d1 (float): 两个探测器的暗计数概率

    Returns:
        tuple: (p_c∨, p_d∨)
    """
    for name, v in (("p_0", p_0), ("p_c0", p_c0), ("p_c1", p_c1), ("p_d0", p_d0), ("p_d1", p_d1)):
        _check_probability(name, v)
    p_c_union = (1.0 - np.asarray(p_0, dtype=float)) * p_c1 + np.asarray(p_0, dtype=float) * p_c0
    p_d_union = 1.0 - (1.0 - np.asarray(p_d0, dtype=float)) * (1.0 - np.asarray(p_d1, dtype=float))
    return _finish(p_c_union), _finish(p_d_union)


def click_prob_laser_detector(lam, p_c, p_d, gradient=False):
    """
    泊松光源直接入射探测器的点击概率 1 - (1-p_d)e^{-p_c λ}

    Args:
        lam (float or array): 平均光子数
        p_c (float): 探测效率
        p_d (float): 暗计数概率
        gradient (bool): 是否返回导数

    Returns:
        ClickProb: 点击概率
    """
    lam = _check_nonnegative("lam", lam)
    p_c = _check_probability("p_c", p_c)
    p_d = _check_probability("p_d", p_d)
    survive = np.exp(-p_c * lam)
    value = 1.0 - (1.0 - p_d) * survive
    grads = {}
    if gradient:
        grads["lam"] = _finish((1.0 - p_d) * p_c * survive)
        grads["p_c"] = _finish((1.0 - p_d) * lam * survive)
        grads["p_d"] = _finish(survive)
    with np.errstate(divide="ignore"):
        log_comp = np.log1p(-p_d) - p_c * lam
    return ClickProb(_finish(value), _finish(log_comp), grads)


def pns_click_prob(lam, p_c, p_d, k, gradient=False):
    """
    Eve截获至多 k 个光子后的点击概率
    P = 1 - q_d·q_c^{-k}·e^{-p_c λ}·γ̄(k, q_c λ) - q_d·Γ̄(k, λ)
    q_c = 0 时使用极限 q_c^{-k}γ̄(k, q_c λ) -> λ^k/Γ(k+1)

    Args:
        lam (float or array): 平均光子数 λ
        p_c (float or array): 探测效率
        p_d (float or array): 暗计数概率
        k (float or array): 截获光子数（连续，k >= 0）
        gradient (bool or iterable): True 返回全部导数，或给出所需键的子集（lam, p_c, p_d, k）

    Returns:
        ClickProb: 点击概率及导数
    """
    lam = _check_nonnegative("lam", lam)
    k = _check_nonnegative("k", k)
    p_c = _check_probability("p_c", p_c)
    p_d = _check_probability("p_d", p_d)
    lam, p_c, p_d, k = np.broadcast_arrays(lam, p_c, p_d, k)
    q_c, q_d = 1.0 - p_c, 1.0 - p_d

    survive = np.exp(-p_c * lam)
    forwarded = survive * _scaled_lower_gamma(k, q_c, lam)
    kept = np.where(k > 0, special.gammaincc(np.where(k > 0, k, 1.0), lam), 0.0)
    miss = forwarded + kept
    value = np.clip(1.0 - q_d * miss, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        log_comp = np.log(q_d) + np.log(miss)

    grads = {}
    wanted = _wanted(gradient)
    if "p_d" in wanted:
        grads["p_d"] = _finish(miss)
    if "lam" in wanted:
        grads["lam"] = _finish(q_d * p_c * forwarded)
    if "p_c" in wanted:
        shifted = survive * k * _scaled_lower_gamma(k + 1.0, q_c, lam)
        grads["p_c"] = _finish(-q_d * (-lam * forwarded + shifted))
    if "k" in wanted:
        d_forwarded = survive * _d_scaled_lower_gamma_dk(k, q_c, lam)
        d_lower = _d_scaled_lower_gamma_dk(k, np.ones_like(lam), lam)
        grads["k"] = _finish(-q_d * (d_forwarded - d_lower))
    return ClickProb(_finish(value), _finish(log_comp), grads)


if __name__ == "__main__":
    # 表格中的GYS探测器参数
    lam, p_c, p_d = 0.48, 0.045, 1.7e-6
    print("激光-探测器点击概率:", click_prob_laser_detector(lam, p_c, p_d).value)
    for k in (0.0, 1.0, 2.5, 3.0):
        result = pns_click_prob(5.0, 0.3, p_d, k, gradient=True)
        print(f"k={k}: P={result.value:.8f}, dP/dk={result.gradient['k']:.6e}")
