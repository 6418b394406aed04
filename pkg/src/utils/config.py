#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
配置模块 - 负责读取并校验JSON配置文件，构造强度网格、Eve信道、先验集合，
并从环境变量（.env）读取进程数
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.models.detection import optimize_eve_channel
from src.models.keyrate import DecoyConfig, KeyRateConfig
from src.models.params import (
    PARAMETER_NAMES,
    AliceParams,
    BobParams,
    EveParams,
    IntensityGrid,
    KMax,
    Prior,
    PriorSet,
    SessionParams,
    SystemParams,
    build_intensity_grid,
    default_eve_priors,
    fully_bayesian_priors,
    k_max,
)
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

WORKERS_ENV = "QKD_WORKERS"

_STRICT = ConfigDict(frozen=True, extra="forbid")


class AliceSection(BaseModel):
    """alice 段；省略 intensities 时按网格启发式生成"""

    model_config = _STRICT

    intensities: Optional[List[float]] = None
    attenuation: float = Field(ge=0.0)
    distance_ab: float = Field(ge=0.0)


class EveSection(BaseModel):
    """eve 段；channel_eff 可写为 "optimized"（按增益伪装准则求解）"""

    model_config = _STRICT

    distance_ae: float = Field(default=0.0, ge=0.0)
    channel_eff: Union[float, Literal["optimized"]] = 1.0
    photons_per_pulse: float = Field(default=1.0, ge=1.0)
    intercept_fraction: float = Field(default=0.0, ge=0.0, le=1.0)


class GridSection(BaseModel):
    model_config = _STRICT

    count: int = Field(default=8, ge=4)
    cap: float = Field(default=10.0, gt=0.0)


class PriorsSection(BaseModel):
    """
    priors 段
    mode=eve 只推断Eve参数；mode=fully_bayesian 另为系统参数加上矩匹配先验
    overrides 按扁平参数名覆盖单个先验，fixed 列出强制固定的参数
    """

    model_config = _STRICT

    mode: Literal["eve", "fully_bayesian"] = "eve"
    sd_fraction: float = Field(default=0.10, gt=0.0, lt=1.0)
    overrides: Dict[str, Prior] = {}
    fixed: List[str] = []


class ExperimentConfig(BaseModel):
    """配置文件的完整结构，未知字段视为错误"""

    model_config = _STRICT

    alice: AliceSection
    bob: BobParams
    eve: EveSection = EveSection()
    session: SessionParams = SessionParams()
    grid: GridSection = GridSection()
    priors: PriorsSection = PriorsSection()
    keyrate: KeyRateConfig = KeyRateConfig()
    decoy: DecoyConfig = DecoyConfig()


@dataclass(frozen=True)
class ResolvedConfig:
    """
    解析后的实验配置

    Attributes:
        theta: 完整系统参数（强度与 p_EB 已确定）
        session: 会话参数
        grid: 生成强度所用的网格（配置直接给出强度时为None）
        k_max: k 的上限估计
        priors: 先验集合
        keyrate, decoy: 密钥率参数
        workers: 进程数
        source: 原始配置
    """

    theta: SystemParams
    session: SessionParams
    grid: Optional[IntensityGrid]
    k_max: KMax
    priors: PriorSet
    keyrate: KeyRateConfig
    decoy: DecoyConfig
    workers: int
    source: ExperimentConfig

    def snapshot(self):
        """写入运行清单的配置快照（包含解析出的强度与 p_EB）"""
        return {
            "config": self.source.model_dump(mode="json"),
            "resolved": {
                "intensities": list(self.theta.alice.intensities),
                "channel_eff": self.theta.eve.channel_eff,
                "k_max": {"value": self.k_max.value, "found": self.k_max.found},
                "free_parameters": list(self.priors.free_names),
            },
        }


def read_workers():
    """
    从环境变量（可由 .env 提供）读取进程数，缺省为1

    Returns:
        int: 进程数
    """
    load_dotenv()
    raw = os.getenv(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} 必须为正整数，收到 {raw!r}") from None
    if workers < 1:
        raise ConfigurationError(f"{WORKERS_ENV} 必须为正整数，收到 {workers}")
    return workers


def _resolve_intensities(section: AliceSection, bob: BobParams, grid: GridSection) -> Tuple[AliceParams, Optional[IntensityGrid]]:
    if section.intensities:
        alice = AliceParams(
            intensities=tuple(section.intensities), attenuation=section.attenuation, distance_ab=section.distance_ab
        )
        return alice, None
    placeholder = AliceParams(intensities=(1.0,), attenuation=section.attenuation, distance_ab=section.distance_ab)
    built, intensities = build_intensity_grid(placeholder, bob, count=grid.count, cap=grid.cap)
    return placeholder.model_copy(update={"intensities": intensities}), built


def _resolve_priors(section: PriorsSection, theta: SystemParams, kmax: KMax) -> PriorSet:
    priors = default_eve_priors(theta.alice, kmax.value if kmax.found else None)
    if section.mode == "fully_bayesian":
        priors = fully_bayesian_priors(theta, section.sd_fraction).merged(priors)
    if section.overrides:
        priors = priors.merged(PriorSet(priors=section.overrides))
    unknown = set(section.fixed) - set(PARAMETER_NAMES)
    if unknown:
        raise ConfigurationError(f"priors.fixed 包含未知参数: {sorted(unknown)}")
    if section.fixed:
        priors = priors.merged(PriorSet(priors={name: Prior(kind="fixed") for name in section.fixed}))
    return priors


def resolve_config(config: ExperimentConfig, workers=None) -> ResolvedConfig:
    """
    解析配置：生成强度网格、求解 p_EB、构造先验

    Args:
        config (ExperimentConfig): 已校验的配置
        workers (int): 进程数，缺省从环境变量读取

    Returns:
        ResolvedConfig: 解析结果
    """
    try:
        alice, grid = _resolve_intensities(config.alice, config.bob, config.grid)
        optimized = config.eve.channel_eff == "optimized"
        eve = EveParams(
            distance_ae=config.eve.distance_ae,
            channel_eff=1.0 if optimized else config.eve.channel_eff,
            photons_per_pulse=config.eve.photons_per_pulse,
            intercept_fraction=config.eve.intercept_fraction,
        )
        theta = SystemParams(alice=alice, bob=config.bob, eve=eve)
    except ValidationError as exc:
        raise ConfigurationError(f"配置参数无效: {exc}") from exc
    if optimized:
        theta = theta.with_values({"channel_eff": optimize_eve_channel(theta)})

    kmax = k_max(alice, config.bob, grid if grid is not None else max(alice.intensities))
    try:
        priors = _resolve_priors(config.priors, theta, kmax)
    except ValidationError as exc:
        raise ConfigurationError(f"先验设置无效: {exc}") from exc
    return ResolvedConfig(
        theta=theta,
        session=config.session,
        grid=grid,
        k_max=kmax,
        priors=priors,
        keyrate=config.keyrate,
        decoy=config.decoy,
        workers=workers if workers is not None else read_workers(),
        source=config,
    )


def parse_config(data, workers=None) -> ResolvedConfig:
    """从字典解析配置"""
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"配置文件校验失败:\n{exc}") from exc
    return resolve_config(config, workers)


def load_config(path, workers=None) -> ResolvedConfig:
    """
    读取JSON配置文件

    Args:
        path (str or Path): 配置文件路径
        workers (int): 进程数，缺省从环境变量读取

    Returns:
        ResolvedConfig: 解析后的配置
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"找不到配置文件: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"配置文件不是有效的JSON: {exc}") from exc
    logger.info("已读取配置: %s", path)
    return parse_config(data, workers)
