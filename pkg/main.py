#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
QKD 贝叶斯分析工具 - 主程序入口
"""

import argparse
import logging
import sys

from src.experiment_runner import Command, ExperimentRunner
from src.services.visualization import PLOT_KINDS
from src.utils.config import load_config
from src.utils.errors import QKDError, exit_code_for

LOG_FORMAT = "%(asctime)s [%(levelname)s] [%(name)s] %(message)s"


def parse_arguments(argv=None):
    """
    解析命令行参数

    Args:
        argv (list): 参数列表，缺省使用 sys.argv

    Returns:
        argparse.Namespace: 解析后的参数
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON配置文件路径")
    common.add_argument("--out", type=str, help="输出目录")
    common.add_argument("--verbose", action="store_true", help="输出调试日志")
    common.add_argument("--quiet", action="store_true", help="只输出警告，并关闭进度条")

    parser = argparse.ArgumentParser(description="BB84弱相干脉冲QKD的广义PNS攻击仿真与贝叶斯分析工具")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="仿真一次会话并导出计数")
    simulate.add_argument("--pulses", type=int, help="脉冲数（默认取配置中的 session.pulses）")
    simulate.add_argument("--model", choices=["iid", "hmm"], help="仿真模型")
    simulate.add_argument("--seed", type=int, help="随机种子")
    simulate.add_argument("--records", action="store_true", help="同时导出逐脉冲记录 records.csv")

    infer = commands.add_parser("infer", parents=[common], help="后验推断（MAP + 切片采样）")
    infer.add_argument("--counts", type=str, required=True, help="计数CSV")
    infer.add_argument("--samples", type=int, help="保留样本数（默认 100000）")
    infer.add_argument("--burnin", type=int, help="燃烧期（默认 1000）")
    infer.add_argument("--model", choices=["iid", "hmm"], help="似然模型")
    infer.add_argument("--seed", type=int, help="随机种子")
    infer.add_argument("--chains", type=int, help="并行链数（>1 时额外输出分半R̂）")

    keyrate = commands.add_parser("keyrate", parents=[common], help="由后验链计算密钥率分布")
    keyrate.add_argument("--chain", type=str, required=True, help="链CSV")
    keyrate.add_argument("--model", choices=["iid", "hmm"], help="与推断一致的模型")
    keyrate.add_argument("--thin", type=int, help="抽稀间隔")

    compare = commands.add_parser("compare", parents=[common], help="本方案与诱骗态协议的距离扫描")
    compare.add_argument("--distances", type=str, default="0:5:150", help="start:step:stop（km）")
    compare.add_argument("--intensities", type=str, help="本方案强度列表，逗号分隔（默认 0.48,1,5,10）")
    compare.add_argument("--model", choices=["iid", "hmm"], help="本方案使用的模型")

    validate = commands.add_parser("validate", parents=[common], help="多次仿真与模型置信区间的覆盖率")
    validate.add_argument("--runs", type=int, help="会话次数")
    validate.add_argument("--pulses", type=int, help="每次会话的脉冲数")
    validate.add_argument("--model", choices=["iid", "hmm"], help="仿真与验证模型")
    validate.add_argument("--seed", type=int, help="随机种子")
    validate.add_argument("--error-rates", dest="error_rates", action="store_true", help="同时检验误码率的Beta近似区间")

    plot = commands.add_parser("plot", parents=[common], help="根据CSV结果绘图")
    plot.add_argument("--input", type=str, required=True, help="输入CSV")
    plot.add_argument("--kind", choices=PLOT_KINDS, required=True, help="图表类型")

    commands.add_parser("help", parents=[common], help="显示命令说明")

    return parser.parse_args(argv)


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv=None):
    """
    主函数

    Returns:
        int: 退出码
    """
    args = parse_arguments(argv)
    configure_logging(args.verbose, args.quiet)

    config = load_config(args.config) if args.config else None
    runner = ExperimentRunner(config, progress=not args.quiet)
    options = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "quiet")}
    response = runner.process(Command(args.command, options))
    print(response.content)
    if response.metadata.get("output_dir"):
        print(f"\n结果已写入: {response.metadata['output_dir']}")
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n程序已被用户中断")
        sys.exit(0)
    except QKDError as e:
        print(f"\n程序运行出错: {str(e)}", file=sys.stderr)
        sys.exit(exit_code_for(e))
    except Exception as e:
        print(f"\n程序运行出错: {str(e)}", file=sys.stderr)
        sys.exit(1)
