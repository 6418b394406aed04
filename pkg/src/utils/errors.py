#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
异常模块 - 定义项目统一的异常层次以及命令行退出码映射
"""


class QKDError(Exception):
    """
    项目异常基类
    所有可预期的错误都继承自此类，命令行据此映射退出码
    """

    exit_code = 1


class ConfigurationError(QKDError):
    """配置文件缺失、格式错误或参数越界"""

    exit_code = 2


class InputError(QKDError):
    """输入文件缺失或与配置不一致（例如计数表布局不匹配）"""

    exit_code = 3


class DomainError(QKDError, ValueError):
    """库函数收到定义域之外的数值参数"""

    exit_code = 2


class NumericalError(QKDError):
    """数值计算失败的基类"""

    exit_code = 4


class ModelConsistencyError(NumericalError):
    """联合概率重构出现明显为负的单元"""


class ConvergenceError(NumericalError):
    """
    迭代算法未在限定次数内收敛
    """

    def __init__(self, message, residual=None, iterations=None):
        """
        初始化收敛异常

        Args:
            message (str): 错误描述
            residual (float): 最后一次迭代的残差
            iterations (int): 已执行的迭代次数
        """
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InferenceError(NumericalError):
    """后验构造或MAP优化失败"""


class SamplerError(InferenceError):
    """
    切片采样器失败（例如切片持续为空）
    """

    def __init__(self, message, diagnostics=None):
        """
        初始化采样异常

        Args:
            message (str): 错误描述
            diagnostics (dict): 诊断信息（当前点、拒绝次数等）
        """
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def exit_code_for(error):
    """
    根据异常类型返回命令行退出码

    Args:
        error (BaseException): 捕获到的异常

    Returns:
        int: 退出码（0成功，2配置错误，3输入错误，4数值失败，其余为1）
    """
    if isinstance(error, QKDError):
        return error.exit_code
    return 1
