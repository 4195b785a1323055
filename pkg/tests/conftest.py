"""
segmerge 测试公共夹具
"""

import numpy as np
import pytest

from segmerge.core.config import ModelConfig
from segmerge.core.tensor import MAC_COUNTER


@pytest.fixture(autouse=True)
def _isolated_logs(tmp_path):
    """日志文件写到临时目录，不污染工作区"""
    from segmerge.core.log import setup_logging
    setup_logging("WARNING", str(tmp_path / "segmerge.log"))
    yield


@pytest.fixture
def rng():
    """随机性质测试用的定种子 numpy 生成器"""
    return np.random.default_rng(1234)


@pytest.fixture
def macs():
    """测试前后清零的 MAC 计数器"""
    MAC_COUNTER.reset()
    yield MAC_COUNTER
    MAC_COUNTER.reset()


@pytest.fixture
def tiny_config():
    """四阶段小模型，64x64 下毫秒级完成"""
    return ModelConfig.from_tables(
        channels=[8, 16, 24, 32], depths=[1, 1, 1, 1], heads=[1, 2, 3, 4], sr_ratios=[8, 4, 2, 1],
        num_classes=3, decoder_dim=8,
    )
