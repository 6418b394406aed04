#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
导出模块 - 负责将计数、链、密钥率曲线等结果写为CSV/JSON，并生成带校验和的运行清单
"""

import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from src import __version__
from src.utils.errors import InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class RunManifest(BaseModel):
    """
    运行清单
    记录配置快照、种子、时间戳、工具版本以及每个输出文件的SHA-256校验和
    """

    model_config = ConfigDict(extra="forbid")

    command: str
    version: str = __version__
    seed: Optional[int] = None
    arguments: Dict[str, Any] = {}
    config: Dict[str, Any] = {}
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = {}


def _timestamp():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256_file(path):
    """计算文件的SHA-256"""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


class ResultExporter:
    """
    结果导出类
    所有文件写入同一输出目录，finish() 时生成 manifest.json
    """

    def __init__(self, output_dir, command, seed=None, arguments=None, config=None):
        """
        初始化导出器

        Args:
            output_dir (str or Path): 输出目录（不存在时创建）
            command (str): 命令名
            seed (int): 随机种子
            arguments (dict): 命令行参数
            config (dict): 配置快照
        """
        self.output_dir = Path(output_dir)
        os.makedirs(self.output_dir, exist_ok=True)
        self.manifest = RunManifest(
            command=command,
            seed=seed,
            arguments=_jsonable(arguments or {}),
            config=_jsonable(config or {}),
            started_at=_timestamp(),
        )
        self._written: List[str] = []

    def path(self, name):
        return self.output_dir / name

    def write_csv(self, frame, name):
        """
        写CSV（UTF-8、LF换行、不含行索引）

        Args:
            frame (pandas.DataFrame): 表格
            name (str): 文件名

        Returns:
            Path: 文件路径
        """
        target = self.path(name)
        frame.to_csv(target, index=False, lineterminator="\n", encoding="utf-8")
        self._written.append(name)
        logger.info("已写入 %s（%d 行）", target, len(frame))
        return target

    def write_json(self, document, name):
        target = self.path(name)
        with open(target, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(_jsonable(document), handle, indent=2, ensure_ascii=False, sort_keys=False)
            handle.write("\n")
        self._written.append(name)
        logger.info("已写入 %s", target)
        return target

    def register(self, name):
        """登记由其他组件写入输出目录的文件（例如图表）"""
        if not self.path(name).is_file():
            raise InputError(f"待登记的文件不存在: {self.path(name)}")
        self._written.append(name)

    def finish(self):
        """
        计算所有输出文件的校验和并写入运行清单

        Returns:
            RunManifest: 运行清单
        """
        artifacts = {name: sha256_file(self.path(name)) for name in dict.fromkeys(self._written)}
        self.manifest = self.manifest.model_copy(update={"artifacts": artifacts, "finished_at": _timestamp()})
        with open(self.path(MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as handle:
            handle.write(self.manifest.model_dump_json(indent=2))
            handle.write("\n")
        return self.manifest


def load_manifest(path):
    """读取运行清单"""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise InputError(f"找不到运行清单: {path}")
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def verify_manifest(path):
    """
    校验清单中列出的文件是否与记录的校验和一致

    Returns:
        dict: 文件名 -> 是否一致
    """
    manifest = load_manifest(path)
    base = Path(path) if Path(path).is_dir() else Path(path).parent
    return {
        name: (base / name).is_file() and sha256_file(base / name) == digest
        for name, digest in manifest.artifacts.items()
    }
