#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
切片采样模块 - 负责秩收缩切片采样器（协方差自适应）以及对数密度的负无穷标记
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from tqdm import tqdm

from src.utils.errors import SamplerError

logger = logging.getLogger(__name__)


class NegativeInfinity:
    """对数密度为 -∞ 的显式标记（单例，按 is 判断）"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NEG_INF"

    def __float__(self):
        return -math.inf

    def __reduce__(self):
        return (NegativeInfinity, ())


NEG_INF = NegativeInfinity()

# log_density(x) -> (对数密度或 NEG_INF, 梯度或 None)
LogDensity = Callable[[np.ndarray], Tuple[object, np.ndarray]]


@dataclass(frozen=True)
class SliceStep:
    """单步采样结果"""

    x: np.ndarray
    log_density: float
    rejections: int


@dataclass(frozen=True)
class SliceRun:
    """
    一条链的原始输出

    Attributes:
        samples: 燃烧期之后的样本（n_samples × d）
        log_density: 每个样本的对数密度
        rejections: 每个样本之前被拒绝的提议次数
    """

    samples: np.ndarray
    log_density: np.ndarray
    rejections: np.ndarray


def sampler_rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _outside(value, level):
    return value is NEG_INF or not value > level


class ShrinkingRankSlice:
    """
    秩收缩切片采样器
    每次被拒绝时，若投影梯度与位移方向接近平行则把该方向移出提议子空间，否则缩小碎屑标准差
    """

    def __init__(self, log_density: LogDensity, crumb_sd=1.0, shrink=0.95, max_rejections=10_000):
        """
        初始化采样器

        Args:
            log_density (callable): x -> (对数密度或 NEG_INF, 梯度)
            crumb_sd (float): 初始碎屑标准差
            shrink (float): 每次拒绝时标准差的收缩因子
            max_rejections (int): 单步允许的最大拒绝次数
        """
        if crumb_sd <= 0 or not 0.0 < shrink < 1.0:
            raise SamplerError("碎屑标准差必须为正且收缩因子位于(0,1)")
        self.log_density = log_density
        self.crumb_sd = crumb_sd
        self.shrink = shrink
        self.max_rejections = max_rejections

    def step(self, x0, logf0, rng) -> SliceStep:
        """
        从 x0 出发执行一次切片更新

        Args:
            x0 (numpy.ndarray): 当前点
            logf0 (float): 当前点的对数密度
            rng (numpy.random.Generator): 随机数生成器

        Returns:
            SliceStep: 新的点
        """
        d = x0.size
        level = logf0 - rng.exponential()
        basis = np.zeros((d, 0))
        sigma = self.crumb_sd
        precision = 0.0
        weighted = np.zeros(d)

        def project(v):
            return v - basis @ (basis.T @ v)

        for rejection in range(self.max_rejections):
            crumb = x0 + project(sigma * rng.standard_normal(d))
            precision += sigma**-2
            weighted += crumb * sigma**-2
            mean = weighted / precision
            x = x0 + project(mean - x0 + rng.standard_normal(d) / math.sqrt(precision))
            value, grad = self.log_density(x)
            if not _outside(value, level):
                return SliceStep(x=x, log_density=float(value), rejections=rejection)

            g = project(np.asarray(grad, dtype=float)) if value is not NEG_INF and grad is not None else None
            displacement = x - x0
            g_norm = np.linalg.norm(g) if g is not None else 0.0
            d_norm = np.linalg.norm(displacement)
            if (
                basis.shape[1] < d - 1
                and g_norm > 0.0
                and d_norm > 0.0
                and abs(g @ displacement) > 0.5 * g_norm * d_norm
            ):
                basis = np.column_stack([basis, g / g_norm])
            else:
                sigma *= self.shrink

        raise SamplerError(
            f"切片在 {self.max_rejections} 次提议后仍为空",
            diagnostics={"x0": x0.tolist(), "log_density": float(logf0), "crumb_sd": sigma, "rank": int(basis.shape[1])},
        )

    def run(self, x0, n_samples, burn_in, rng, progress=False) -> SliceRun:
        """
        运行一条链

        Args:
            x0 (numpy.ndarray): 初始点（通常为MAP估计）
            n_samples (int): 保留的样本数
            burn_in (int): 丢弃的燃烧期样本数
            rng (numpy.random.Generator): 随机数生成器
            progress (bool): 是否显示进度条

        Returns:
            SliceRun: 链的样本
        """
        x = np.asarray(x0, dtype=float).copy()
        logf, _ = self.log_density(x)
        if logf is NEG_INF:
            raise SamplerError("初始点的对数密度为 -inf", diagnostics={"x0": x.tolist()})
        logf = float(logf)
        samples = np.empty((n_samples, x.size))
        log_density = np.empty(n_samples)
        rejections = np.zeros(n_samples, dtype=np.int64)
        for i in tqdm(range(burn_in + n_samples), desc="切片采样", unit="样本", disable=not progress):
            result = self.step(x, logf, rng)
            x, logf = result.x, result.log_density
            j = i - burn_in
            if j >= 0:
                samples[j] = x
                log_density[j] = logf
                rejections[j] = result.rejections
        if n_samples:
            logger.debug("平均每个样本拒绝 %.2f 次", rejections.mean())
        return SliceRun(samples=samples, log_density=log_density, rejections=rejections)


if __name__ == "__main__":
    # 强相关二维高斯
    cov = np.array([[1.0, 0.95], [0.95, 1.0]])
    precision_matrix = np.linalg.inv(cov)

    def gaussian(x):
        return -0.5 * x @ precision_matrix @ x, -precision_matrix @ x

    run = ShrinkingRankSlice(gaussian).run(np.zeros(2), 5000, 100, sampler_rng(1))
    print("样本均值:", run.samples.mean(axis=0))
    print("样本协方差:\n", np.cov(run.samples.T))
