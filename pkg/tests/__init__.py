# 测试包
# 此文件使tests目录成为一个Python包
