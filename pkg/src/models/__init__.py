# 物理模型包（参数、光子统计、探测、HMM、密钥率）
# 此文件使models目录成为一个Python包
