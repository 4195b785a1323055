"""
segmerge
token 合并注意力（Segformer++ 风格）的数值实现、代价模型与基准测试工具
"""

__version__ = "0.1.0"
