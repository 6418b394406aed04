#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
推断服务模块 - 负责多项式似然、先验、无界变换与雅可比、后验及其梯度、MAP估计、
秩收缩切片采样以及后验汇总
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from src.models.detection import iid_prob_vector
from src.models.hmm import hmm_prob_vector
from src.models.params import CSV_LABELS, EVE_PARAMETER_NAMES, PriorSet
from src.services.sampler import NEG_INF, ShrinkingRankSlice, sampler_rng
from src.services.simulator import derive_run_seed
from src.utils.errors import DomainError, InferenceError, InputError

logger = logging.getLogger(__name__)

SUMMARY_QUANTILES = (0.005, 0.025, 0.5, 0.975, 0.995)
DEFAULT_SAMPLES = 100_000
DEFAULT_BURN_IN = 1_000


@dataclass(frozen=True)
class PosteriorEval:
    """后验对数密度（或 NEG_INF）及其在无界坐标下的梯度"""

    log_posterior: object
    gradient: np.ndarray

    @property
    def finite(self):
        return self.log_posterior is not NEG_INF


@dataclass(frozen=True)
class MapResult:
    """MAP估计结果"""

    phi: np.ndarray
    values: Dict[str, float]
    log_posterior: float
    gradient: np.ndarray
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class Chain:
    """
    一条马尔可夫链
    values 为自然（有界）空间的样本，phi 为无界空间的样本（从CSV读入时可能为None）
    """

    names: Tuple[str, ...]
    values: np.ndarray
    log_posterior: np.ndarray
    seed: int = 0
    burn_in: int = 0
    phi: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.values)

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def to_frame(self):
        """导出为 sample_index, d_AE, p_EB, k, Delta[, 其他参数], log_posterior"""
        ordered = [n for n in EVE_PARAMETER_NAMES if n in self.names] + [
            n for n in self.names if n not in EVE_PARAMETER_NAMES
        ]
        frame = pd.DataFrame({"sample_index": np.arange(len(self))})
        for name in ordered:
            frame[CSV_LABELS[name]] = self.column(name)
        frame["log_posterior"] = self.log_posterior
        return frame

    @classmethod
    def from_frame(cls, frame, seed=0, burn_in=0):
        """从链CSV还原（仅自然空间样本）"""
        reverse = {label: name for name, label in CSV_LABELS.items()}
        columns = [c for c in frame.columns if c in reverse]
        if not columns or "log_posterior" not in frame.columns:
            raise InputError("链文件缺少参数列或 log_posterior 列")
        unknown = set(frame.columns) - set(columns) - {"sample_index", "log_posterior"}
        if unknown:
            raise InputError(f"链文件包含未知列: {sorted(unknown)}")
        return cls(
            names=tuple(reverse[c] for c in columns),
            values=frame[columns].to_numpy(dtype=float),
            log_posterior=frame["log_posterior"].to_numpy(dtype=float),
            seed=seed,
            burn_in=burn_in,
        )


def model_prob_vector(theta, model="iid", gradient_names=()):
    """按模型类型返回观测概率向量"""
    if model == "iid":
        return iid_prob_vector(theta, gradient_names)
    if model == "hmm":
        return hmm_prob_vector(theta, "compact", gradient_names)
    raise DomainError(f"未知的似然模型: {model}")


def _check_layout(counts, theta):
    if counts.n_lambda != theta.alice.n_lambda:
        raise InputError(f"计数的强度数量 {counts.n_lambda} 与配置 {theta.alice.n_lambda} 不符")


def _multinomial(cells, probs, gradient):
    impossible = (probs <= 0.0) & (cells > 0)
    if np.any(impossible):
        return NEG_INF, {}
    total = cells.sum()
    value = float(special.gammaln(total + 1) - special.gammaln(cells + 1).sum() + special.xlogy(cells, probs).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cells > 0, cells / probs, 0.0)
    return value, {name: float(ratio @ dp) for name, dp in gradient.items()}


def log_likelihood(counts, theta, model="iid", gradient_names=()):
    """
    多项式对数似然（含多项式系数）

    Args:
        counts (OutcomeCounts): 观测计数
        theta (SystemParams): 系统参数
        model (str): iid 或 hmm
        gradient_names (Iterable[str]): 需要梯度的扁平参数名

    Returns:
        tuple: (对数似然或 NEG_INF, {参数名: 偏导数})
    """
    _check_layout(counts, theta)
    probs = model_prob_vector(theta, model, tuple(gradient_names))
    return _multinomial(counts.cells.astype(float), probs.cells, probs.gradient)


def log_prior(theta, priors: PriorSet):
    """自由参数的对数先验之和；越界或 d_AE > d_AB 时返回 NEG_INF"""
    if theta.eve.distance_ae > theta.alice.distance_ab:
        return NEG_INF
    total = 0.0
    for name in priors.free_names:
        value = priors[name].log_density(theta.value(name))
        if value == -math.inf:
            return NEG_INF
        total += value
    return total


def to_unbounded(theta, priors: PriorSet):
    """自然空间 -> 无界空间 φ（按 free_names 顺序）"""
    return np.array([priors[name].to_unbounded(theta.value(name)) for name in priors.free_names])


def from_unbounded(phi, priors: PriorSet, theta_fixed):
    """无界空间 φ -> 完整系统参数（固定参数取自 theta_fixed）"""
    names = priors.free_names
    if len(phi) != len(names):
        raise DomainError(f"φ 的维数 {len(phi)} 与自由参数个数 {len(names)} 不符")
    return theta_fixed.with_values({name: priors[name].from_unbounded(p) for name, p in zip(names, phi)})


def log_jacobian(phi, priors: PriorSet):
    return float(sum(priors[name].log_jacobian(p) for name, p in zip(priors.free_names, phi)))


def d_log_jacobian(phi, priors: PriorSet):
    return np.array([priors[name].d_log_jacobian(p) for name, p in zip(priors.free_names, phi)])


class PosteriorModel:
    """
    无界空间中的对数后验 log p(φ | C) = 似然 + 先验 + 雅可比
    可重入，可被多个进程同时使用
    """

    def __init__(self, counts, theta_fixed, priors: PriorSet, model="iid"):
        """
        初始化后验

        Args:
            counts (OutcomeCounts): 观测计数
            theta_fixed (SystemParams): 固定参数（自由参数的取值将被覆盖）
            priors (PriorSet): 先验集合
            model (str): iid 或 hmm
        """
        _check_layout(counts, theta_fixed)
        if not priors.free_names:
            raise InferenceError("没有需要推断的自由参数")
        if model not in ("iid", "hmm"):
            raise DomainError(f"未知的似然模型: {model}")
        self.counts = counts
        self.theta_fixed = theta_fixed
        self.priors = priors
        self.model = model
        self.names = priors.free_names

    @property
    def dimension(self):
        return len(self.names)

    def theta(self, phi):
        return from_unbounded(phi, self.priors, self.theta_fixed)

    def evaluate(self, phi) -> PosteriorEval:
        """
        计算对数后验及梯度

        Args:
            phi (array): 无界坐标

        Returns:
            PosteriorEval: 后验值与梯度
        """
        phi = np.asarray(phi, dtype=float)
        zeros = np.zeros(self.dimension)
        if not np.all(np.isfinite(phi)):
            return PosteriorEval(NEG_INF, zeros)
        theta = self.theta(phi)
        prior_value = log_prior(theta, self.priors)
        if prior_value is NEG_INF:
            return PosteriorEval(NEG_INF, zeros)
        likelihood, d_likelihood = log_likelihood(self.counts, theta, self.model, self.names)
        if likelihood is NEG_INF:
            return PosteriorEval(NEG_INF, zeros)

        gradient = np.empty(self.dimension)
        for i, (name, p) in enumerate(zip(self.names, phi)):
            prior = self.priors[name]
            natural = theta.value(name)
            d_natural = d_likelihood[name] + prior.d_log_density(natural)
            gradient[i] = d_natural * prior.d_value_d_phi(p) + prior.d_log_jacobian(p)
        value = likelihood + prior_value + log_jacobian(phi, self.priors)
        return PosteriorEval(value, gradient)

    def __call__(self, phi):
        result = self.evaluate(phi)
        return result.log_posterior, result.gradient

    def prior_mean(self):
        return np.array([self.priors[n].to_unbounded(self.priors[n].mean()) for n in self.names])

    def prior_draw(self, rng):
        draws = []
        for name in self.names:
            prior = self.priors[name]
            value = prior.sample(rng)
            # 保持严格位于支撑集内部
            while not _interior(prior, value):
                value = prior.sample(rng)
            draws.append(prior.to_unbounded(value))
        return np.array(draws)


def _interior(prior, value):
    if prior.kind == "beta":
        return prior.lower < value < prior.upper
    return value > prior.lower


def map_estimate(posterior: PosteriorModel, init=None, rng=None, max_iter=10_000, gtol=1e-6, fallback_draws=100):
    """
    在无界空间中最大化后验（BFGS，带线搜索）

    Args:
        posterior (PosteriorModel): 后验
        init (array): 初始 φ，缺省为先验均值
        rng (numpy.random.Generator): 初始点不可用时抽取先验样本所用的生成器
        max_iter (int): 最大迭代次数
        gtol (float): 梯度无穷范数阈值
        fallback_draws (int): 初始点不可用时最多尝试的先验样本数

    Returns:
        MapResult: MAP估计
    """
    start = posterior.prior_mean() if init is None else np.asarray(init, dtype=float)
    if not posterior.evaluate(start).finite:
        rng = rng or sampler_rng(0)
        for attempt in range(fallback_draws):
            start = posterior.prior_draw(rng)
            if posterior.evaluate(start).finite:
                logger.info("先验均值处后验为 -inf，改用第 %d 个先验样本作为初始点", attempt + 1)
                break
        else:
            raise InferenceError(f"在 {fallback_draws} 个先验样本中找不到后验有限的初始点")

    history: List[float] = []

    def objective(phi):
        result = posterior.evaluate(phi)
        if not result.finite:
            return 1e300, np.zeros_like(phi)
        return -result.log_posterior, -result.gradient

    def record(phi):
        history.append(-objective(phi)[0])

    result = optimize.minimize(
        objective,
        start,
        jac=True,
        method="BFGS",
        callback=record,
        options={"gtol": gtol, "norm": np.inf, "maxiter": max_iter},
    )
    final = posterior.evaluate(result.x)
    if not final.finite:
        raise InferenceError("MAP优化结束于后验为 -inf 的点")
    grad_norm = float(np.max(np.abs(final.gradient)))
    converged = grad_norm < gtol
    if not converged:
        logger.warning("MAP未完全收敛: ‖∇‖∞=%.3e (%s)", grad_norm, result.message)
    theta = posterior.theta(result.x)
    values = {name: theta.value(name) for name in posterior.names}
    logger.info("MAP估计: %s", ", ".join(f"{CSV_LABELS[k]}={v:.6g}" for k, v in values.items()))
    return MapResult(
        phi=result.x,
        values=values,
        log_posterior=float(final.log_posterior),
        gradient=final.gradient,
        iterations=int(result.nit),
        converged=converged,
        history=history,
    )


def srss_sample(
    posterior: PosteriorModel,
    n_samples=DEFAULT_SAMPLES,
    burn_in=DEFAULT_BURN_IN,
    seed=0,
    start=None,
    crumb_sd=1.0,
    progress=False,
) -> Chain:
    """
    用秩收缩切片采样器从后验抽样

    Args:
        posterior (PosteriorModel): 后验
        n_samples (int): 保留样本数（默认 10^5）
        burn_in (int): 燃烧期（默认 10^3）
        seed (int): 随机种子
        start (array): 初始 φ，缺省先求 MAP
        crumb_sd (float): 初始碎屑标准差
        progress (bool): 是否显示进度条

    Returns:
        Chain: 马尔可夫链
    """
    if start is None:
        start = map_estimate(posterior).phi
    sampler = ShrinkingRankSlice(posterior, crumb_sd=crumb_sd)
    run = sampler.run(np.asarray(start, dtype=float), n_samples, burn_in, sampler_rng(seed), progress=progress)
    values = np.array(
        [[posterior.priors[n].from_unbounded(p) for n, p in zip(posterior.names, row)] for row in run.samples]
    ).reshape(n_samples, posterior.dimension)
    return Chain(
        names=posterior.names,
        values=values,
        log_posterior=run.log_density,
        seed=int(seed),
        burn_in=int(burn_in),
        phi=run.samples,
    )


def _chain_worker(args):
    posterior, n_samples, burn_in, seed, start = args
    return srss_sample(posterior, n_samples, burn_in, seed, start)


def run_chains(posterior, n_chains, n_samples=DEFAULT_SAMPLES, burn_in=DEFAULT_BURN_IN, seed=0, workers=None, progress=False):
    """
    从同一MAP出发、以派生种子并行运行多条链

    Returns:
        list: Chain 列表
    """
    start = map_estimate(posterior).phi
    if n_chains == 1:
        return [srss_sample(posterior, n_samples, burn_in, seed, start, progress=progress)]
    tasks = [(posterior, n_samples, burn_in, derive_run_seed(seed, c), start) for c in range(n_chains)]
    if not workers or workers <= 1:
        return [_chain_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, n_chains)) as executor:
        return list(executor.map(_chain_worker, tasks))


def summarize(chain: Chain):
    """
    自然空间的后验汇总：均值、标准差、分位数与99%可信区间 [0.5%, 99.5%]

    Args:
        chain (Chain): 马尔可夫链

    Returns:
        dict: 参数标签 -> 统计量
    """
    if len(chain) == 0:
        raise InferenceError("空链无法汇总")
    summary = {}
    for name in chain.names:
        column = chain.column(name)
        quantiles = np.quantile(column, SUMMARY_QUANTILES)
        summary[CSV_LABELS[name]] = {
            "mean": float(column.mean()),
            "sd": float(column.std(ddof=1)) if len(column) > 1 else 0.0,
            "quantiles": {f"{q:g}": float(v) for q, v in zip(SUMMARY_QUANTILES, quantiles)},
            "ci99": [float(quantiles[0]), float(quantiles[-1])],
        }
    return summary


def split_rhat(chains: Sequence[Chain]):
    """
    分半 R̂ 收敛诊断

    Args:
        chains (Sequence[Chain]): 参数相同的若干条链

    Returns:
        dict: 参数标签 -> R̂
    """
    if not chains:
        raise InferenceError("至少需要一条链")
    length = min(len(c) for c in chains) // 2
    if length < 2:
        raise InferenceError("链太短，无法计算 R̂")
    result = {}
    for name in chains[0].names:
        halves = []
        for c in chains:
            column = c.column(name)
            halves.extend([column[:length], column[length : 2 * length]])
        halves = np.array(halves)
        within = halves.var(axis=1, ddof=1).mean()
        between = length * halves.mean(axis=1).var(ddof=1)
        if within == 0:
            result[CSV_LABELS[name]] = 1.0 if between == 0 else math.inf
            continue
        pooled = (length - 1) / length * within + between / length
        result[CSV_LABELS[name]] = float(math.sqrt(pooled / within))
    return result


def nb_pmf(n, alpha, beta):
    """
    泊松-Gamma边缘分布（负二项）P(n | α, β)，Gamma的速率为β

    Args:
        n (int or array): 光子数
        alpha (float): 形状参数
        beta (float): 速率参数

    Returns:
        float or array: 概率
    """
    if alpha <= 0 or beta <= 0:
        raise DomainError("负二项分布的形状与速率必须为正")
    if np.any(np.asarray(n) < 0):
        raise DomainError("n 不能为负")
    return stats.nbinom.pmf(n, alpha, beta / (beta + 1.0))


def bb_pmf(k, n, alpha, beta):
    """二项-Beta边缘分布 P(k | n, α, β)"""
    if alpha <= 0 or beta <= 0:
        raise DomainError("Beta-二项分布的形状参数必须为正")
    if n < 0 or np.any(np.asarray(k) < 0) or np.any(np.asarray(k) > n):
        raise DomainError("需要 0 <= k <= n")
    return stats.betabinom.pmf(k, n, alpha, beta)


if __name__ == "__main__":
    from src.models.params import AliceParams, BobParams, EveParams, SystemParams, default_eve_priors
    from src.services.simulator import session_counts

    theta = SystemParams(
        alice=AliceParams(intensities=(0.5, 2.0, 5.0, 9.0), attenuation=0.21, distance_ab=50.0),
        bob=BobParams(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033),
        eve=EveParams(distance_ae=10.0, channel_eff=0.9, photons_per_pulse=3.0, intercept_fraction=0.2),
    )
    counts = session_counts(1_000_000, theta, seed=3)
    posterior = PosteriorModel(counts, theta, default_eve_priors(theta.alice, 6.0))
    estimate = map_estimate(posterior)
    print("MAP:", estimate.values)
    chain = srss_sample(posterior, n_samples=500, burn_in=50, seed=1, start=estimate.phi, progress=True)
    print(summarize(chain))
