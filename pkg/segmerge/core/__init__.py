"""
核心模块
包含张量引擎、随机数、配置管理、工具和异常定义
"""

from .config import BenchConfig, ModelConfig, StageSpec, resolve_preset
from .exceptions import (ConfigError, FormatError, LoadError, NumericError, ParameterError, PolicyError,
                         SegMergeError, ShapeError)
from .report_generator import BenchReportGenerator
from .tensor import MAC_COUNTER, MacCounter, mac_counting
from .utils import SegMergeUtils

__all__ = [
    'BenchConfig',
    'ModelConfig',
    'StageSpec',
    'resolve_preset',
    'SegMergeError',
    'ShapeError',
    'ParameterError',
    'NumericError',
    'ConfigError',
    'PolicyError',
    'LoadError',
    'FormatError',
    'BenchReportGenerator',
    'MAC_COUNTER',
    'MacCounter',
    'mac_counting',
    'SegMergeUtils',
]
