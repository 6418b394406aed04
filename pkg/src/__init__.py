# QKD 贝叶斯分析工具包
# 此文件使src目录成为一个Python包

__version__ = "1.0.0"
