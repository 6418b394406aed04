# 工具模块包
# 此文件使utils目录成为一个Python包