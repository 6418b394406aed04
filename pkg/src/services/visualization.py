#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
数据可视化模块 - 负责根据导出的CSV结果绘制密钥率曲线、后验边缘分布与覆盖率图
"""

import logging

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

from src.utils.errors import InputError

logger = logging.getLogger(__name__)

PLOT_KINDS = ("keyrate_curves", "gain_error_curves", "marginals", "keyrate_posterior", "coverage")


def _require(frame, columns, kind):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"绘制 {kind} 需要列 {missing}")


class QKDVisualizer:
    """
    QKD结果可视化类
    所有方法接收 pandas.DataFrame（与导出的CSV列一致），返回 matplotlib Figure
    """

    def __init__(self, style='darkgrid'):
        """
        初始化可视化器

        Args:
            style (str): seaborn绘图风格，默认为'darkgrid'
        """
        sns.set_style(style)
        # 设置中文字体，按优先级尝试不同字体
        plt.rcParams['font.sans-serif'] = ['SimHei', 'Microsoft YaHei', 'PingFang SC', 'Heiti SC', 'Arial Unicode MS', 'DejaVu Sans']
        plt.rcParams['axes.unicode_minus'] = False

    def plot_keyrate_curves(self, rates, figsize=(12, 6)):
        """
        绘制密钥率随距离变化的曲线（对数纵轴，只画正值）

        Args:
            rates (pandas.DataFrame): 列为 distance_km, protocol, intensity, K
            figsize (tuple): 图形大小
        """
        _require(rates, ("distance_km", "protocol", "intensity", "K"), "keyrate_curves")
        positive = rates[rates["K"] > 0].copy()
        positive["curve"] = positive["protocol"] + " μ=" + positive["intensity"].map("{:g}".format)
        fig, ax = plt.subplots(figsize=figsize)
        sns.lineplot(data=positive, x="distance_km", y="K", hue="curve", ax=ax, linewidth=2)
        ax.set_yscale("log")
        ax.set_title('密钥率与通信距离', fontsize=15)
        ax.set_xlabel('距离 (km)', fontsize=12)
        ax.set_ylabel('密钥率 K（每脉冲）', fontsize=12)
        ax.grid(True, alpha=0.3)
        plt.tight_layout()
        return fig

    def plot_gain_error_curves(self, curves, figsize=(12, 10)):
        """
        绘制增益与误码率随距离变化的曲线

        Args:
            curves (pandas.DataFrame): 列为 distance_km, protocol, intensity, Q, delta
            figsize (tuple): 图形大小
        """
        _require(curves, ("distance_km", "protocol", "intensity", "Q", "delta"), "gain_error_curves")
        frame = curves.copy()
        frame["curve"] = frame["protocol"] + " μ=" + frame["intensity"].map("{:g}".format)
        fig, (top, bottom) = plt.subplots(2, 1, figsize=figsize, sharex=True)
        sns.lineplot(data=frame[frame["Q"] > 0], x="distance_km", y="Q", hue="curve", ax=top)
        top.set_yscale("log")
        top.set_ylabel('增益 Q', fontsize=12)
        top.set_title('增益与误码率', fontsize=15)
        sns.lineplot(data=frame, x="distance_km", y="delta", hue="curve", ax=bottom, legend=False)
        bottom.set_xlabel('距离 (km)', fontsize=12)
        bottom.set_ylabel('误码率 δ', fontsize=12)
        plt.tight_layout()
        return fig

    def plot_posterior_marginals(self, chain, truth=None, figsize=None):
        """
        绘制每个参数的后验边缘分布及99%可信区间

        Args:
            chain (pandas.DataFrame): 链CSV（sample_index, 参数列..., log_posterior）
            truth (dict): 参数标签 -> 真值（可选）
            figsize (tuple): 图形大小
        """
        columns = [c for c in chain.columns if c not in ("sample_index", "log_posterior")]
        if not columns:
            raise InputError("链文件中没有参数列")
        figsize = figsize or (4 * len(columns), 4)
        fig, axes = plt.subplots(1, len(columns), figsize=figsize, squeeze=False)
        for ax, column in zip(axes[0], columns):
            values = chain[column].to_numpy()
            sns.histplot(values, kde=True, stat="density", ax=ax)
            low, high = np.quantile(values, (0.005, 0.995))
            ax.axvspan(low, high, color='orange', alpha=0.15, label='99% 可信区间')
            if truth and column in truth:
                ax.axvline(truth[column], color='red', linestyle='--', label='真值')
            ax.set_title(column, fontsize=13)
        axes[0][0].legend()
        plt.tight_layout()
        return fig

    def plot_keyrate_posterior(self, frame, figsize=(10, 6)):
        """
        绘制各强度下密钥率后验的分布

        Args:
            frame (pandas.DataFrame): 列为 lambda_index, sample_index, K
            figsize (tuple): 图形大小
        """
        _require(frame, ("lambda_index", "K"), "keyrate_posterior")
        fig, ax = plt.subplots(figsize=figsize)
        sns.boxplot(data=frame, x="lambda_index", y="K", ax=ax, showfliers=False)
        ax.axhline(0.0, color='grey', linewidth=1)
        ax.set_title('密钥率后验分布', fontsize=15)
        ax.set_xlabel('强度下标', fontsize=12)
        ax.set_ylabel('K', fontsize=12)
        plt.tight_layout()
        return fig

    def plot_coverage(self, report, figsize=(12, 6)):
        """
        绘制每个单元的99%置信区间覆盖率

        Args:
            report (pandas.DataFrame): validate 输出的覆盖率表
            figsize (tuple): 图形大小
        """
        _require(report, ("m", "lambda_index", "outcome", "coverage"), "coverage")
        frame = report.copy()
        frame["cell"] = (
            "m" + frame["m"].astype(str) + "/" + frame["outcome"].astype(str).str.zfill(2)
            + "/λ" + frame["lambda_index"].astype(str)
        )
        fig, ax = plt.subplots(figsize=figsize)
        sns.barplot(data=frame, x="cell", y="coverage", ax=ax, color='steelblue')
        ax.axhline(0.99, color='red', linestyle='--', label='名义水平 0.99')
        ax.axhline(0.95, color='orange', linestyle=':', label='下限 0.95')
        ax.set_ylim(min(0.9, float(frame["coverage"].min()) - 0.01), 1.005)
        ax.set_title('单元计数的置信区间覆盖率', fontsize=15)
        ax.set_xlabel('单元', fontsize=12)
        ax.set_ylabel('覆盖率', fontsize=12)
        ax.tick_params(axis='x', rotation=90)
        ax.legend()
        plt.tight_layout()
        return fig

    def render(self, kind, frame, truth=None):
        """按类型绘图"""
        if kind == "keyrate_curves":
            return self.plot_keyrate_curves(frame)
        if kind == "gain_error_curves":
            return self.plot_gain_error_curves(frame)
        if kind == "marginals":
            return self.plot_posterior_marginals(frame, truth)
        if kind == "keyrate_posterior":
            return self.plot_keyrate_posterior(frame)
        if kind == "coverage":
            return self.plot_coverage(frame)
        raise InputError(f"未知的图表类型: {kind}（可选 {', '.join(PLOT_KINDS)}）")

    def save_figure(self, fig, filename):
        """
        保存图形到文件

        Args:
            fig (matplotlib.figure.Figure): 图形对象
            filename (str): 文件名
        """
        fig.savefig(filename, dpi=300, bbox_inches='tight')
        plt.close(fig)
        logger.info("图形已保存至: %s", filename)


# 测试代码
if __name__ == "__main__":
    from src.models.keyrate import distance_sweep, parse_distances
    from src.models.params import AliceParams, BobParams, SystemParams

    theta = SystemParams(
        alice=AliceParams(intensities=(0.48,), attenuation=0.21, distance_ab=50.0),
        bob=BobParams(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033),
    )
    rates, curves = distance_sweep(theta, parse_distances("0:5:150"))

    visualizer = QKDVisualizer()
    visualizer.plot_keyrate_curves(rates)
    visualizer.plot_gain_error_curves(curves)
    plt.show()
