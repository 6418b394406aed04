# 服务模块包（仿真、推断、采样、可视化）
# 此文件使services目录成为一个Python包
