#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
参数模块 - 定义Alice/Bob/Eve参数容器、先验分布、矩匹配构造以及强度网格启发式
"""

import logging
import math
from typing import Dict, Iterable, Literal, Mapping, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import optimize, special, stats

from src.utils.errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

LN10_OVER_10 = math.log(10.0) / 10.0

# 扁平参数名称（梯度向量与后验坐标的统一顺序）
PARAMETER_NAMES = (
    "attenuation",
    "distance_ab",
    "afterpulse_0",
    "afterpulse_1",
    "efficiency_0",
    "efficiency_1",
    "dark_count_0",
    "dark_count_1",
    "misalignment",
    "distance_ae",
    "channel_eff",
    "photons_per_pulse",
    "intercept_fraction",
)

EVE_PARAMETER_NAMES = ("distance_ae", "channel_eff", "photons_per_pulse", "intercept_fraction")

# 导出CSV时使用的列名
CSV_LABELS = {
    "attenuation": "alpha",
    "distance_ab": "d_AB",
    "afterpulse_0": "p_a0",
    "afterpulse_1": "p_a1",
    "efficiency_0": "p_c0",
    "efficiency_1": "p_c1",
    "dark_count_0": "p_d0",
    "dark_count_1": "p_d1",
    "misalignment": "p_e",
    "distance_ae": "d_AE",
    "channel_eff": "p_EB",
    "photons_per_pulse": "k",
    "intercept_fraction": "Delta",
}

# 扁平名称 -> (所属分组, 字段名, 探测器下标)
_REGISTRY = {
    "attenuation": ("alice", "attenuation", None),
    "distance_ab": ("alice", "distance_ab", None),
    "afterpulse_0": ("bob", "afterpulse", 0),
    "afterpulse_1": ("bob", "afterpulse", 1),
    "efficiency_0": ("bob", "efficiency", 0),
    "efficiency_1": ("bob", "efficiency", 1),
    "dark_count_0": ("bob", "dark_count", 0),
    "dark_count_1": ("bob", "dark_count", 1),
    "misalignment": ("bob", "misalignment", None),
    "distance_ae": ("eve", "distance_ae", None),
    "channel_eff": ("eve", "channel_eff", None),
    "photons_per_pulse": ("eve", "photons_per_pulse", None),
    "intercept_fraction": ("eve", "intercept_fraction", None),
}

_FROZEN = ConfigDict(frozen=True, extra="forbid")


class AliceParams(BaseModel):
    """
    发送端参数
    包含各脉冲强度、光纤衰减系数（dB/km）以及Alice到Bob的距离（km）
    """

    model_config = _FROZEN

    intensities: Tuple[float, ...] = Field(min_length=1)
    attenuation: float = Field(ge=0.0)
    distance_ab: float = Field(ge=0.0)

    @field_validator("intensities")
    @classmethod
    def _check_intensities(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError("所有强度必须为正数")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("强度列表必须严格递增")
        return value

    @property
    def channel_eff(self):
        """Alice到Bob的信道效率 p_AB = 10^(-α·d_AB/10)"""
        return 10.0 ** (-self.attenuation * self.distance_ab / 10.0)

    @property
    def n_lambda(self):
        return len(self.intensities)


def _broadcast_pair(value):
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    return value


class BobParams(BaseModel):
    """
    接收端参数
    后脉冲、效率、暗计数均为二元组（探测器0, 探测器1），失准概率为标量
    """

    model_config = _FROZEN

    afterpulse: Tuple[float, float] = (0.0, 0.0)
    efficiency: Tuple[float, float]
    dark_count: Tuple[float, float]
    misalignment: float = Field(ge=0.0, lt=1.0)

    @field_validator("afterpulse", "efficiency", "dark_count", mode="before")
    @classmethod
    def _broadcast(cls, value):
        # 标量同时用于两个探测器
        return _broadcast_pair(value)

    @model_validator(mode="after")
    def _check_ranges(self):
        for p in self.afterpulse:
            if not 0.0 <= p < 1.0:
                raise ValueError(f"后脉冲概率必须位于[0,1)区间: {p}")
        for p in self.efficiency:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"探测效率必须位于(0,1]区间: {p}")
        for p in self.dark_count:
            if not 0.0 <= p < 1.0:
                raise ValueError(f"暗计数概率必须位于[0,1)区间: {p}")
        return self

    def split(self, ratio=0.1):
        """
        按比例拆分两个探测器的参数（探测器0乘以1-ratio，探测器1乘以1+ratio）

        Args:
            ratio (float): 拆分比例，默认0.1即±10%

        Returns:
            BobParams: 拆分后的新参数
        """

        def _pair(values):
            mean = 0.5 * (values[0] + values[1])
            return (mean * (1.0 - ratio), min(mean * (1.0 + ratio), 1.0))

        return BobParams(
            afterpulse=_pair(self.afterpulse),
            efficiency=_pair(self.efficiency),
            dark_count=_pair(self.dark_count),
            misalignment=self.misalignment,
        )


class EveParams(BaseModel):
    """
    窃听者参数
    截获位置 d_AE、Eve到Bob的信道效率 p_EB、每脉冲截获光子数 k（连续）、截获比例 Δ
    """

    model_config = _FROZEN

    distance_ae: float = Field(default=0.0, ge=0.0)
    channel_eff: float = Field(default=1.0, ge=0.0, le=1.0)
    photons_per_pulse: float = Field(default=1.0, ge=1.0)
    intercept_fraction: float = Field(default=0.0, ge=0.0, le=1.0)


class SessionParams(BaseModel):
    """会话参数：脉冲数、重复次数、随机种子与模型类型"""

    model_config = _FROZEN

    pulses: int = Field(default=1_000_000, ge=1)
    runs: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    model: Literal["iid", "hmm"] = "iid"


class SystemParams(BaseModel):
    """
    完整系统参数 θ = {θ_A, θ_B, θ_E}
    """

    model_config = _FROZEN

    alice: AliceParams
    bob: BobParams
    eve: EveParams = EveParams()

    @model_validator(mode="after")
    def _check_eve_position(self):
        if self.eve.distance_ae > self.alice.distance_ab:
            raise ValueError("Eve的截获距离不能超过Alice到Bob的距离")
        return self

    @property
    def eve_path_eff(self):
        """Alice到Eve的信道效率 p_AE"""
        return 10.0 ** (-self.alice.attenuation * self.eve.distance_ae / 10.0)

    def value(self, name):
        """
        按扁平名称读取标量参数

        Args:
            name (str): 参数名，见 PARAMETER_NAMES

        Returns:
            float: 参数值
        """
        section, field, index = _lookup(name)
        raw = getattr(getattr(self, section), field)
        return float(raw if index is None else raw[index])

    def values(self, names=PARAMETER_NAMES):
        return {name: self.value(name) for name in names}

    def with_values(self, values: Mapping[str, float]):
        """
        返回替换了若干扁平参数的新对象（不重新校验，供采样器高频调用）

        Args:
            values (Mapping[str, float]): 参数名到新值的映射

        Returns:
            SystemParams: 新的参数对象
        """
        updates = {"alice": {}, "bob": {}, "eve": {}}
        for name, new_value in values.items():
            section, field, index = _lookup(name)
            if index is None:
                updates[section][field] = float(new_value)
            else:
                pair = list(updates[section].get(field, getattr(getattr(self, section), field)))
                pair[index] = float(new_value)
                updates[section][field] = tuple(pair)
        return self.model_copy(
            update={
                section: getattr(self, section).model_copy(update=fields)
                for section, fields in updates.items()
                if fields
            }
        )

    def with_intensities(self, intensities):
        alice = self.alice.model_copy(update={"intensities": tuple(float(v) for v in intensities)})
        return self.model_copy(update={"alice": alice})

    def without_eve(self):
        return self.model_copy(update={"eve": self.eve.model_copy(update={"intercept_fraction": 0.0})})


def _lookup(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise DomainError(f"未知参数名: {name}") from None


class Prior(BaseModel):
    """
    单个参数的先验
    kind 为 beta（区间 [lower, upper] 上缩放的Beta分布）、gamma（θ-lower 服从 Gamma(shape_a, rate=shape_b)）
    或 fixed（点质量，取值来自固定参数）
    """

    model_config = _FROZEN

    kind: Literal["beta", "gamma", "fixed"]
    shape_a: float = 1.0
    shape_b: float = 1.0
    lower: float = 0.0
    upper: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "fixed":
            return self
        if self.shape_a <= 0 or self.shape_b <= 0:
            raise ValueError("形状参数必须为正")
        if self.kind == "beta":
            if self.upper is None or not math.isfinite(self.upper):
                raise ValueError("beta先验需要有限的上界")
            if self.lower >= self.upper:
                raise ValueError("下界必须小于上界")
        elif self.upper is not None and math.isfinite(self.upper):
            raise ValueError("gamma先验的上界必须为无穷")
        return self

    @property
    def is_free(self):
        return self.kind != "fixed"

    @property
    def width(self):
        return self.upper - self.lower

    def mean(self):
        if self.kind == "beta":
            return self.lower + self.width * self.shape_a / (self.shape_a + self.shape_b)
        if self.kind == "gamma":
            return self.lower + self.shape_a / self.shape_b
        raise DomainError("fixed先验没有分布均值")

    def in_support(self, value):
        if self.kind == "beta":
            return self.lower <= value <= self.upper
        if self.kind == "gamma":
            return value >= self.lower
        return True

    def log_density(self, value):
        """对数先验密度；支撑集之外返回 -inf（由调用方转换为显式标记）"""
        if self.kind == "fixed":
            return 0.0
        if not self.in_support(value):
            return -math.inf
        if self.kind == "beta":
            return float(stats.beta.logpdf(value, self.shape_a, self.shape_b, loc=self.lower, scale=self.width))
        return float(stats.gamma.logpdf(value - self.lower, self.shape_a, scale=1.0 / self.shape_b))

    def d_log_density(self, value):
        if self.kind == "fixed":
            return 0.0
        # 形状参数为1的项恒为0，避免边界处出现 0/0
        left = (self.shape_a - 1.0) / (value - self.lower) if self.shape_a != 1.0 else 0.0
        if self.kind == "gamma":
            return left - self.shape_b
        right = (self.shape_b - 1.0) / (self.upper - value) if self.shape_b != 1.0 else 0.0
        return left - right

    def to_unbounded(self, value):
        if self.kind == "beta":
            if not self.lower < value < self.upper:
                raise DomainError(f"边界值无法变换到无界空间: {value}")
            return float(special.logit((value - self.lower) / self.width))
        if self.kind == "gamma":
            if not value > self.lower:
                raise DomainError(f"边界值无法变换到无界空间: {value}")
            return math.log(value - self.lower)
        raise DomainError("fixed参数没有无界坐标")

    def from_unbounded(self, phi):
        if self.kind == "beta":
            return self.lower + self.width * float(special.expit(phi))
        return self.lower + math.exp(phi)

    def d_value_d_phi(self, phi):
        if self.kind == "beta":
            s = float(special.expit(phi))
            return self.width * s * (1.0 - s)
        return math.exp(phi)

    def log_jacobian(self, phi):
        if self.kind == "beta":
            # log σ(φ)(1-σ(φ)) = -softplus(φ) - softplus(-φ)
            return math.log(self.width) - np.logaddexp(0.0, phi) - np.logaddexp(0.0, -phi)
        return float(phi)

    def d_log_jacobian(self, phi):
        if self.kind == "beta":
            return 1.0 - 2.0 * float(special.expit(phi))
        return 1.0

    def sample(self, rng, size=None):
        if self.kind == "beta":
            return self.lower + self.width * rng.beta(self.shape_a, self.shape_b, size=size)
        if self.kind == "gamma":
            return self.lower + rng.gamma(self.shape_a, 1.0 / self.shape_b, size=size)
        raise DomainError("fixed先验不能采样")


class PriorSet(BaseModel):
    """
    先验集合，按 PARAMETER_NAMES 的顺序给出自由参数
    """

    model_config = _FROZEN

    priors: Dict[str, Prior]

    @field_validator("priors")
    @classmethod
    def _known_names(cls, value):
        unknown = set(value) - set(PARAMETER_NAMES)
        if unknown:
            raise ValueError(f"未知的先验参数: {sorted(unknown)}")
        return value

    @property
    def free_names(self):
        return tuple(n for n in PARAMETER_NAMES if n in self.priors and self.priors[n].is_free)

    def __getitem__(self, name):
        return self.priors[name]

    def merged(self, other: "PriorSet"):
        """返回合并后的先验集合（other 中的条目优先）"""
        return PriorSet(priors={**self.priors, **other.priors})


class IntensityGrid(BaseModel):
    """等间距强度网格"""

    model_config = _FROZEN

    lambda_min: float = Field(gt=0.0)
    lambda_max: float
    count: int = Field(default=8, ge=4)
    cap: float = 10.0

    @model_validator(mode="after")
    def _check(self):
        if not self.lambda_min < self.lambda_max <= self.cap:
            raise ValueError("需要满足 lambda_min < lambda_max <= cap")
        return self

    def intensities(self):
        return tuple(float(v) for v in np.linspace(self.lambda_min, self.lambda_max, self.count))


class KMax(NamedTuple):
    value: float
    found: bool


def moment_match_gamma(mean, variance):
    """
    按均值与方差构造Gamma分布参数（形状α，速率β）

    Args:
        mean (float): 目标均值（>0）
        variance (float): 目标方差（>0）

    Returns:
        tuple: (alpha, beta)
    """
    if mean <= 0 or variance <= 0:
        raise DomainError(f"Gamma矩匹配需要正的均值与方差: mean={mean}, variance={variance}")
    return mean**2 / variance, mean / variance


def moment_match_beta(mean, variance):
    """
    按均值与方差构造Beta分布参数

    Args:
        mean (float): 目标均值，位于(0,1)
        variance (float): 目标方差，须小于 mean(1-mean)

    Returns:
        tuple: (alpha, beta)
    """
    if not 0.0 < mean < 1.0:
        raise DomainError(f"Beta矩匹配需要均值位于(0,1): {mean}")
    if not 0.0 < variance < mean * (1.0 - mean):
        raise DomainError(f"方差 {variance} 超出Beta分布可表示的范围")
    alpha = mean**2 * (1.0 - mean) / variance - mean
    beta = mean * (1.0 - mean) ** 2 / variance + mean - 1.0
    return alpha, beta


def _reference_eve():
    # 零距离、无损、每脉冲截获1个光子的Eve
    return EveParams(distance_ae=0.0, channel_eff=1.0, photons_per_pulse=1.0, intercept_fraction=1.0)


def build_intensity_grid(alice, bob, count=8, cap=10.0):
    """
    构造强度网格
    λ_min 为Eve（k=1, d_AE=0, p_EB=1）可伪装正常点击概率的临界强度，
    λ_max 为无窃听时单点击概率的最大值位置（不超过 cap）

    Args:
        alice (AliceParams): 发送端参数（其强度列表不参与计算）
        bob (BobParams): 接收端参数
        count (int): 网格点数，至少为4
        cap (float): 强度上限，默认10

    Returns:
        tuple: (IntensityGrid, 强度元组)
    """
    from src.models import detection

    if count < 4:
        raise ConfigurationError(f"强度数量至少为4（当前为{count}）")

    honest = SystemParams(alice=alice, bob=bob)
    attacked = SystemParams(alice=alice, bob=bob, eve=_reference_eve())

    def gap(lam):
        return detection.matched_click_prob(honest, lam, intercept=False) - detection.matched_click_prob(
            attacked, lam, intercept=True
        )

    lo, hi = 1e-6, cap
    if gap(lo) * gap(hi) > 0:
        raise ConfigurationError("在 (1e-6, cap) 内找不到 lambda_min 的符号变化")
    lambda_min = optimize.bisect(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    def negative_single_click(lam):
        return -detection.single_click_prob(honest, lam)

    result = optimize.minimize_scalar(
        negative_single_click, bounds=(lambda_min, cap), method="bounded", options={"xatol": 1e-10}
    )
    lambda_max = float(result.x)
    if negative_single_click(cap) <= result.fun:
        lambda_max = cap
    lambda_max = min(lambda_max, cap)
    if lambda_max <= lambda_min:
        raise ConfigurationError(f"lambda_max={lambda_max:.6g} 不大于 lambda_min={lambda_min:.6g}")

    grid = IntensityGrid(lambda_min=lambda_min, lambda_max=lambda_max, count=count, cap=cap)
    logger.info("强度网格: lambda_min=%.6g, lambda_max=%.6g, 共%d个点", lambda_min, lambda_max, count)
    return grid, grid.intensities()


def k_max(alice, bob, grid):
    """
    计算Eve在最大强度下仍可伪装的最大截获光子数

    Args:
        alice (AliceParams): 发送端参数
        bob (BobParams): 接收端参数
        grid (IntensityGrid or float): 强度网格或直接给出的最大强度

    Returns:
        KMax: (k_max, 是否找到根)；找不到根时返回 (1, False)
    """
    from src.models import detection

    lam_top = grid.lambda_max if isinstance(grid, IntensityGrid) else float(grid)
    honest = SystemParams(alice=alice, bob=bob)
    target = detection.matched_click_prob(honest, lam_top, intercept=False)

    def gap(k):
        attacked = SystemParams(alice=alice, bob=bob, eve=_reference_eve().model_copy(update={"photons_per_pulse": k}))
        return detection.matched_click_prob(attacked, lam_top, intercept=True) - target

    if gap(1.0) < 0:
        logger.warning("Eve在任何k下都无法补偿信道损耗，k_max取1")
        return KMax(1.0, False)
    hi = 2.0
    while gap(hi) > 0:
        hi *= 2.0
        if hi > 1e4:
            logger.warning("k_max 搜索超出范围，k_max取1")
            return KMax(1.0, False)
    value = optimize.bisect(gap, 1.0, hi, xtol=1e-13, maxiter=200)
    return KMax(float(value), True)


def gamma_rate_for_k(k_max_value):
    """
    按"先验均值位于1与k_max中点"的规则计算 β_k（α_k=1）

    Args:
        k_max_value (float): k_max

    Returns:
        float: β_k = 2/(k_max-1)
    """
    if k_max_value <= 1.0:
        raise DomainError("k_max 必须大于1")
    return 2.0 / (k_max_value - 1.0)


def default_eve_priors(alice, k_max_value=None):
    """
    默认的Eve参数先验：d_AE~Beta(1,2)[0,d_AB]，p_EB~Beta(1,1)，k-1~Gamma(1,β_k)，Δ~Beta(2,1)

    Args:
        alice (AliceParams): 发送端参数，d_AE 先验的上界取配置的 d_AB
            （d_AB 也为自由参数时，d_AE <= d_AB 由 log_prior 联合检查）
        k_max_value (float): k_max，缺省或不大于1时 β_k 取1

    Returns:
        PriorSet: 先验集合
    """
    if k_max_value is not None and k_max_value > 1.0:
        rate_k = gamma_rate_for_k(k_max_value)
    else:
        rate_k = 1.0
    return PriorSet(
        priors={
            "distance_ae": Prior(kind="beta", shape_a=1.0, shape_b=2.0, lower=0.0, upper=alice.distance_ab),
            "channel_eff": Prior(kind="beta", shape_a=1.0, shape_b=1.0, lower=0.0, upper=1.0),
            "photons_per_pulse": Prior(kind="gamma", shape_a=1.0, shape_b=rate_k, lower=1.0),
            "intercept_fraction": Prior(kind="beta", shape_a=2.0, shape_b=1.0, lower=0.0, upper=1.0),
        }
    )


_SEMI_BOUNDED = ("attenuation", "distance_ab")
_SYSTEM_NAMES = PARAMETER_NAMES[: PARAMETER_NAMES.index("distance_ae")]


def _matched_prior(name, mean, sd_fraction):
    variance = (sd_fraction * mean) ** 2
    if name in _SEMI_BOUNDED:
        alpha, beta = moment_match_gamma(mean, variance)
        return Prior(kind="gamma", shape_a=alpha, shape_b=beta, lower=0.0)
    alpha, beta = moment_match_beta(mean, variance)
    return Prior(kind="beta", shape_a=alpha, shape_b=beta, lower=0.0, upper=1.0)


def fully_bayesian_priors(theta, sd_fraction=0.10, names: Optional[Iterable[str]] = None):
    """
    为系统参数（θ_A、θ_B）构造矩匹配先验：均值为报告值，标准差为 sd_fraction 倍均值
    取值为0的参数（例如关闭的后脉冲）保持固定
    d_AB 随机化后 d_AE 的先验尺度不随之变化，约束 d_AE <= d_AB 在 log_prior 中执行

    Args:
        theta (SystemParams): 报告的系统参数
        sd_fraction (float): 相对标准差，默认10%
        names (Iterable[str]): 需要随机化的参数名，缺省为全部系统参数

    Returns:
        PriorSet: 系统参数的先验集合
    """
    priors = {}
    for name in names or _SYSTEM_NAMES:
        mean = theta.value(name)
        if mean <= 0:
            priors[name] = Prior(kind="fixed")
            continue
        priors[name] = _matched_prior(name, mean, sd_fraction)
    return PriorSet(priors=priors)


def perturb_params(theta, rng, sd_fraction=0.05, names: Optional[Iterable[str]] = None):
    """
    从以报告值为均值、sd_fraction 为相对标准差的分布中抽取一次会话的真实系统参数

    Args:
        theta (SystemParams): 报告的系统参数
        rng (numpy.random.Generator): 随机数生成器
        sd_fraction (float): 相对标准差，默认5%
        names (Iterable[str]): 需要扰动的参数名

    Returns:
        SystemParams: 扰动后的参数
    """
    drawn = {}
    for name in names or _SYSTEM_NAMES:
        mean = theta.value(name)
        if mean <= 0:
            continue
        drawn[name] = float(_matched_prior(name, mean, sd_fraction).sample(rng))
    if "distance_ab" in drawn:
        drawn["distance_ab"] = max(drawn["distance_ab"], theta.eve.distance_ae)
    return theta.with_values(drawn)


if __name__ == "__main__":
    # GYS参数示例
    alice = AliceParams(intensities=(0.48,), attenuation=0.21, distance_ab=50.0)
    bob = BobParams(afterpulse=0.0, efficiency=0.045, dark_count=1.7e-6, misalignment=0.033)
    grid, intensities = build_intensity_grid(alice, bob, count=8)
    print("强度网格:", ", ".join(f"{v:.4f}" for v in intensities))
    kmax = k_max(alice, bob, grid)
    print(f"k_max = {kmax.value:.4f} (找到根: {kmax.found})")
    print("Gamma矩匹配(0.21, 0.042^2):", moment_match_gamma(0.21, 0.042**2))
