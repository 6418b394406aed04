#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
实验编排模块 - 负责串联仿真、推断、密钥率、协议比较与验证，
每个命令把结果写入输出目录并生成运行清单
"""

import logging
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from src.models.detection import DoubleClickMode, error_rate_interval, layout_frame
from src.models.keyrate import (
    DEFAULT_SWEEP_INTENSITIES,
    PROTOCOLS,
    distance_sweep,
    keyrate_at,
    keyrate_posterior,
    keyrate_summary,
    max_positive_distance,
    parse_distances,
)
from src.models.params import CSV_LABELS
from src.services.inference import (
    DEFAULT_BURN_IN,
    DEFAULT_SAMPLES,
    Chain,
    PosteriorModel,
    map_estimate,
    model_prob_vector,
    run_chains,
    split_rhat,
    srss_sample,
    summarize,
)
from src.services.sampler import sampler_rng
from src.services.simulator import (
    OutcomeCounts,
    RECORD_COLUMNS,
    aggregate_counts,
    derive_run_seed,
    gain_error_counts,
    run_sessions,
    simulate,
)
from src.services.visualization import PLOT_KINDS, QKDVisualizer
from src.utils.errors import ConfigurationError, DomainError, InputError
from src.utils.exporter import ResultExporter

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "infer", "keyrate", "compare", "validate", "plot", "help")
CI_LEVEL = 0.99
ERROR_RATE_MODE = DoubleClickMode.COUNT_AS_GAIN_AND_ERROR


class Command:
    """
    命令类
    表示一次要执行的实验命令及其参数
    """

    def __init__(self, name, options=None):
        """
        初始化命令对象

        Args:
            name (str): 命令名
            options (dict): 命令参数
        """
        self.name = name
        self.options = dict(options or {})
        self.timestamp = datetime.now()

    def get(self, key, default=None):
        value = self.options.get(key)
        return default if value is None else value


class Response:
    """
    响应类
    content 为给用户看的文本，metadata 记录输出目录与文件
    """

    def __init__(self, content):
        """
        初始化响应对象

        Args:
            content (str): 响应内容
        """
        self.content = content
        self.timestamp = datetime.now()
        self.metadata = {}


def read_csv(path, what):
    """读取输入CSV，文件不存在或无法解析时抛出 InputError"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"找不到{what}文件: {path}")
    try:
        return pd.read_csv(path, dtype={"outcome": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"无法解析{what}文件 {path}: {exc}") from exc


def pooled_chain(chains):
    """把多条链按顺序拼接为一条，用于汇总"""
    if len(chains) == 1:
        return chains[0]
    return Chain(
        names=chains[0].names,
        values=np.vstack([c.values for c in chains]),
        log_posterior=np.concatenate([c.log_posterior for c in chains]),
        seed=chains[0].seed,
        burn_in=chains[0].burn_in,
    )


def coverage_report(sessions, probs, pulses, level=CI_LEVEL):
    """
    每个单元的二项置信区间覆盖率

    Args:
        sessions (list): 每次会话的 OutcomeCounts
        probs (OutcomeProbs): 模型概率向量
        pulses (int): 每次会话的脉冲数
        level (float): 置信水平

    Returns:
        pandas.DataFrame: m, lambda_index, outcome, probability, expected, ci_low, ci_high, coverage
    """
    counts = np.array([s.cells for s in sessions])
    low, high = stats.binom.interval(level, pulses, probs.cells)
    inside = (counts >= low) & (counts <= high)
    report = layout_frame(probs.n_lambda)
    report["probability"] = probs.cells
    report["expected"] = pulses * probs.cells
    report["ci_low"] = low.astype(np.int64)
    report["ci_high"] = high.astype(np.int64)
    report["coverage"] = inside.mean(axis=0)
    return report


def iid_rejection(sessions, iid_probs):
    """
    用卡方统计量检验合并计数是否服从i.i.d.模型

    Returns:
        tuple: (逐单元表, 总体统计量字典)
    """
    observed = np.sum([s.cells for s in sessions], axis=0).astype(float)
    total = observed.sum()
    p = iid_probs.cells
    usable = p > 0
    expected = total * p
    with np.errstate(divide="ignore", invalid="ignore"):
        cell_stat = np.where(usable, (observed - expected) ** 2 / (expected * (1.0 - p)), 0.0)
    per_cell = layout_frame(iid_probs.n_lambda)
    per_cell["observed"] = observed.astype(np.int64)
    per_cell["expected_iid"] = expected
    per_cell["chi2"] = cell_stat
    per_cell["p_value"] = np.where(usable, stats.chi2.sf(cell_stat, df=1), np.nan)
    scaled = expected[usable] * observed[usable].sum() / expected[usable].sum()
    aggregate = stats.chisquare(observed[usable], scaled)
    overall = {
        "statistic": float(aggregate.statistic),
        "dof": int(usable.sum() - 1),
        "p_value": float(aggregate.pvalue),
        "cells_rejected_1e-6": int((per_cell["p_value"] < 1e-6).sum()),
    }
    return per_cell, overall


class ExperimentRunner:
    """
    实验编排器
    持有解析后的配置，按命令名分派到对应的处理方法
    """

    def __init__(self, config=None, progress=True):
        """
        初始化实验编排器

        Args:
            config (ResolvedConfig): 解析后的配置（plot 与 help 不需要）
            progress (bool): 是否显示进度条
        """
        self.config = config
        self.progress = progress
        self.visualizer = None
        self.history = []

    def process(self, command):
        """
        执行命令

        Args:
            command (Command): 命令对象

        Returns:
            Response: 响应对象
        """
        name = command.name.strip().lower()
        if name == "help":
            return self._help_response()
        if name == "plot":
            response = self._plot(command)
        else:
            if self.config is None:
                raise ConfigurationError(f"命令 {name} 需要 --config")
            handlers = {
                "simulate": self._simulate,
                "infer": self._infer,
                "keyrate": self._keyrate,
                "compare": self._compare,
                "validate": self._validate,
            }
            if name not in handlers:
                raise InputError(f"未知命令: {name}（可选 {', '.join(COMMANDS)}）")
            response = handlers[name](command)
        self.history.append((command, response))
        return response

    def _help_response(self):
        help_text = """
## QKD 贝叶斯分析工具使用指南

支持的命令（均需 --config，plot 除外）：

1. **simulate**  仿真一次会话，输出 counts.csv（可选 --records 输出逐脉冲记录）
2. **infer**     MAP + 秩收缩切片采样，输出 chain.csv 与 summary.json
3. **keyrate**   将后验链变换为各强度的密钥率，输出 keyrate_posterior.csv 与 keyrate_summary.csv
4. **compare**   本方案与诱骗态协议的距离扫描，输出 keyrate_curves.csv 与 gain_error_curves.csv
5. **validate**  多次仿真与模型99%置信区间的覆盖率比较，输出 coverage.csv
6. **plot**      根据上述CSV绘图（--kind 指定类型）

每个命令都会在输出目录写入 manifest.json（配置快照、种子与文件校验和）。
"""
        return Response(help_text)

    def _exporter(self, command, seed=None):
        out = command.get("out")
        if not out:
            raise InputError("需要 --out 指定输出目录")
        snapshot = self.config.snapshot() if self.config is not None else {}
        return ResultExporter(out, command.name, seed=seed, arguments=command.options, config=snapshot)

    def _finish(self, exporter, content):
        manifest = exporter.finish()
        response = Response(content)
        response.metadata = {"output_dir": str(exporter.output_dir), "artifacts": dict(manifest.artifacts)}
        return response

    def _session_defaults(self, command):
        session = self.config.session
        return (
            int(command.get("pulses", session.pulses)),
            command.get("model", session.model),
            int(command.get("seed", session.seed)),
        )

    def _simulate(self, command):
        """仿真一次会话并导出计数"""
        pulses, model, seed = self._session_defaults(command)
        theta = self.config.theta
        n_lambda = theta.alice.n_lambda
        exporter = self._exporter(command, seed)
        logger.info("仿真 %d 个脉冲（模型 %s，种子 %d，N_λ=%d）", pulses, model, seed, n_lambda)

        records_path = exporter.path("records.csv") if command.get("records", False) else None
        counts = OutcomeCounts(np.zeros(8 * n_lambda, dtype=np.int64), n_lambda)
        gain_error = None
        mode = self.config.keyrate.double_click_mode
        for index, frame in enumerate(simulate(pulses, theta, seed, model, progress=self.progress)):
            counts = counts + aggregate_counts(frame, n_lambda)
            chunk = gain_error_counts(frame, n_lambda, mode).set_index(["m", "lambda_index"])
            gain_error = chunk if gain_error is None else gain_error + chunk
            if records_path is not None:
                frame.to_csv(
                    records_path, mode="w" if index == 0 else "a", header=index == 0, index=False, lineterminator="\n"
                )

        exporter.write_csv(counts.to_frame(), "counts.csv")
        if gain_error is not None:
            table = gain_error.reset_index()
            with np.errstate(divide="ignore", invalid="ignore"):
                table["delta"] = np.where(table["gains"] > 0, table["errors"] / table["gains"], np.nan)
            exporter.write_csv(table, "gain_error.csv")
        if records_path is not None:
            if pulses == 0:
                pd.DataFrame(columns=list(RECORD_COLUMNS)).to_csv(records_path, index=False, lineterminator="\n")
            exporter.register("records.csv")

        content = f"已仿真 {pulses} 个脉冲（模型 {model}，种子 {seed}），计数总和 {counts.total}\n" + counts.to_frame().to_string(
            index=False
        )
        return self._finish(exporter, content)

    def _read_counts(self, path):
        frame = read_csv(path, "计数")
        return OutcomeCounts.from_frame(frame, self.config.theta.alice.n_lambda)

    def _infer(self, command):
        """后验推断：MAP 初始化后用秩收缩切片采样抽样"""
        counts_path = command.get("counts")
        if not counts_path:
            raise InputError("infer 需要 --counts")
        counts = self._read_counts(counts_path)
        model = command.get("model", self.config.session.model)
        seed = int(command.get("seed", self.config.session.seed))
        samples = int(command.get("samples", DEFAULT_SAMPLES))
        burn_in = int(command.get("burnin", DEFAULT_BURN_IN))
        n_chains = int(command.get("chains", 1))
        if samples < 1 or burn_in < 0 or n_chains < 1:
            raise InputError("samples 必须为正，burnin 不能为负，chains 至少为1")

        exporter = self._exporter(command, seed)
        posterior = PosteriorModel(counts, self.config.theta, self.config.priors, model)
        logger.info("推断参数: %s（模型 %s，%d 个计数）", [CSV_LABELS[n] for n in posterior.names], model, counts.total)

        map_result = map_estimate(posterior, rng=sampler_rng(seed))
        if n_chains == 1:
            chains = [srss_sample(posterior, samples, burn_in, seed, start=map_result.phi, progress=self.progress)]
            exporter.write_csv(chains[0].to_frame(), "chain.csv")
        else:
            chains = run_chains(
                posterior, n_chains, samples, burn_in, seed, workers=self.config.workers, progress=self.progress
            )
            for index, chain in enumerate(chains):
                exporter.write_csv(chain.to_frame(), f"chain_{index}.csv")

        chain = pooled_chain(chains)
        parameters = summarize(chain)
        truth = {CSV_LABELS[n]: self.config.theta.value(n) for n in posterior.names}
        for label, stats_ in parameters.items():
            low, high = stats_["ci99"]
            stats_["config_value"] = truth[label]
            stats_["covered"] = bool(low <= truth[label] <= high)
        summary = {
            "model": model,
            "samples": samples,
            "burn_in": burn_in,
            "chains": n_chains,
            "map": {
                "values": {CSV_LABELS[k]: v for k, v in map_result.values.items()},
                "log_posterior": map_result.log_posterior,
                "iterations": map_result.iterations,
                "converged": map_result.converged,
            },
            "parameters": parameters,
        }
        if n_chains > 1:
            summary["split_rhat"] = split_rhat(chains)
        exporter.write_json(summary, "summary.json")

        lines = [f"后验汇总（模型 {model}，{len(chain)} 个样本）:"]
        for label, stats_ in parameters.items():
            low, high = stats_["ci99"]
            lines.append(f"  {label:>10}: 均值 {stats_['mean']:.6g}  99%区间 [{low:.6g}, {high:.6g}]")
        return self._finish(exporter, "\n".join(lines))

    def _keyrate(self, command):
        """把后验链变换为各强度的密钥率分布"""
        chain_path = command.get("chain")
        if not chain_path:
            raise InputError("keyrate 需要 --chain")
        chain = Chain.from_frame(read_csv(chain_path, "链"))
        model = command.get("model", self.config.session.model)
        thin = int(command.get("thin", 1))
        exporter = self._exporter(command)

        frame = keyrate_posterior(chain, self.config.theta, self.config.keyrate, model, thin, self.progress)
        truth = keyrate_at(self.config.theta, self.config.keyrate, model).K
        summary = keyrate_summary(frame, truth)
        exporter.write_csv(frame, "keyrate_posterior.csv")
        exporter.write_csv(summary, "keyrate_summary.csv")

        content = "各强度的密钥率后验:\n" + summary.to_string(index=False)
        return self._finish(exporter, content)

    def _compare(self, command):
        """本方案与诱骗态协议的距离扫描"""
        try:
            distances = parse_distances(command.get("distances", "0:5:150"))
        except DomainError as exc:
            raise InputError(str(exc)) from exc
        raw = command.get("intensities")
        try:
            intensities = tuple(float(v) for v in raw.split(",")) if raw else DEFAULT_SWEEP_INTENSITIES
        except ValueError:
            raise InputError(f"强度列表格式错误: {raw!r}") from None
        model = command.get("model", "iid")
        exporter = self._exporter(command)

        rates, curves = distance_sweep(
            self.config.theta,
            distances,
            intensities,
            self.config.keyrate,
            self.config.decoy,
            model,
            progress=self.progress,
        )
        exporter.write_csv(rates, "keyrate_curves.csv")
        exporter.write_csv(curves, "gain_error_curves.csv")

        ranges = []
        for protocol in PROTOCOLS:
            for mu in sorted(rates.loc[rates["protocol"] == protocol, "intensity"].unique()):
                ranges.append(
                    {"protocol": protocol, "intensity": float(mu), "max_distance_km": max_positive_distance(rates, protocol, mu)}
                )
        exporter.write_json({"ranges": ranges}, "compare_summary.json")

        lines = [f"距离扫描 {distances[0]:g}–{distances[-1]:g} km（{len(distances)} 点）的最大正密钥率距离:"]
        for item in ranges:
            reach = "无" if item["max_distance_km"] is None else f"{item['max_distance_km']:g} km"
            lines.append(f"  {item['protocol']:>16} μ={item['intensity']:g}: {reach}")
        return self._finish(exporter, "\n".join(lines))

    def _error_rate_check(self, pulses, model, seed, runs):
        theta = self.config.theta
        n_lambda = theta.alice.n_lambda
        # 误码率检验把双击同时计为增益与误码
        mode = ERROR_RATE_MODE
        intervals = [error_rate_interval(theta, 1, l, pulses, mode, model).interval(CI_LEVEL) for l in range(n_lambda)]
        inside = np.zeros(n_lambda)
        for run in tqdm(range(runs), desc="误码率检验", unit="次", disable=not self.progress):
            table = gain_error_counts(simulate(pulses, theta, derive_run_seed(seed, run), model), n_lambda, mode)
            sifted = table[table["m"] == 1].sort_values("lambda_index")
            with np.errstate(divide="ignore", invalid="ignore"):
                delta = (sifted["errors"] / sifted["gains"]).to_numpy()
            low, high = np.array(intervals).T
            inside += (delta >= low) & (delta <= high)
        return pd.DataFrame(
            {
                "lambda_index": np.arange(n_lambda),
                "ci_low": [i[0] for i in intervals],
                "ci_high": [i[1] for i in intervals],
                "coverage": inside / runs,
            }
        )

    def _validate(self, command):
        """多次仿真，统计每个单元落入模型99%置信区间的比例"""
        pulses, model, seed = self._session_defaults(command)
        runs = int(command.get("runs", self.config.session.runs))
        if runs < 1:
            raise InputError("runs 至少为1")
        exporter = self._exporter(command, seed)
        theta = self.config.theta

        sessions = run_sessions(pulses, theta, seed, runs, model, self.config.workers, self.progress)
        report = coverage_report(sessions, model_prob_vector(theta, model), pulses)
        exporter.write_csv(report, "coverage.csv")
        in_band = report["coverage"].between(0.95, 1.0)
        document = {
            "runs": runs,
            "pulses": pulses,
            "model": model,
            "level": CI_LEVEL,
            "min_coverage": float(report["coverage"].min()),
            "cells_in_band": int(in_band.sum()),
            "cells": len(report),
        }
        lines = [
            f"{runs} 次 × {pulses} 个脉冲（模型 {model}）: 覆盖率最小值 {document['min_coverage']:.3f}，"
            f"{document['cells_in_band']}/{len(report)} 个单元在 [0.95, 1.0] 内"
        ]

        if model == "hmm":
            per_cell, overall = iid_rejection(sessions, model_prob_vector(theta, "iid"))
            exporter.write_csv(per_cell, "iid_rejection.csv")
            document["iid_rejection"] = overall
            lines.append(
                f"i.i.d.模型卡方检验: 统计量 {overall['statistic']:.4g}（自由度 {overall['dof']}），"
                f"p={overall['p_value']:.3g}，{overall['cells_rejected_1e-6']} 个单元在 p<1e-6 下拒绝"
            )

        if command.get("error_rates", False):
            errors = self._error_rate_check(pulses, model, seed, runs)
            exporter.write_csv(errors, "error_rate_coverage.csv")
            document["error_rate_min_coverage"] = float(errors["coverage"].min())
            document["error_rate_double_click_mode"] = ERROR_RATE_MODE.value
            lines.append(f"误码率Beta近似区间覆盖率最小值 {document['error_rate_min_coverage']:.3f}")

        exporter.write_json(document, "validation.json")
        return self._finish(exporter, "\n".join(lines))

    def _plot(self, command):
        """根据导出的CSV绘图"""
        source = command.get("input")
        kind = command.get("kind")
        if not source or not kind:
            raise InputError("plot 需要 --input 与 --kind")
        if kind not in PLOT_KINDS:
            raise InputError(f"未知的图表类型: {kind}（可选 {', '.join(PLOT_KINDS)}）")
        frame = read_csv(source, "绘图输入")
        exporter = self._exporter(command)
        truth = None
        if kind == "marginals" and self.config is not None:
            truth = {label: self.config.theta.value(name) for name, label in CSV_LABELS.items()}
        if self.visualizer is None:
            self.visualizer = QKDVisualizer()
        name = f"{kind}.png"
        self.visualizer.save_figure(self.visualizer.render(kind, frame, truth), exporter.path(name))
        exporter.register(name)
        return self._finish(exporter, f"已绘制 {kind}: {exporter.path(name)}")
