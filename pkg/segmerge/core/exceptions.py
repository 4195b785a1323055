"""
segmerge 异常定义
"""


class SegMergeError(Exception):
    """segmerge 基础异常"""
    pass


class ShapeError(SegMergeError):
    """张量形状错误（维度不匹配、网格不可整除等）"""
    pass


class ParameterError(SegMergeError):
    """标量参数错误"""
    pass


class NumericError(SegMergeError):
    """数值错误（NaN / 非有限输入）"""
    pass


class ConfigError(SegMergeError):
    """配置错误"""
    pass


class PolicyError(SegMergeError):
    """合并策略不可行"""
    pass


class LoadError(SegMergeError):
    """权重与配置不一致"""
    pass


class FormatError(SegMergeError):
    """清单或权重文件格式错误"""
    pass
