"""
可移植随机数发生器
SplitMix64 播种的 xoshiro256++，Box-Muller 生成标准正态分布。

为了在 numpy 中向量化，发生器由 LANES 条独立的 xoshiro256++ 状态组成，
状态按 SplitMix64 序列依次填充；每一步输出 LANES 个数，按 (step, lane) 行主序展开。
同一 seed 在任何平台上得到逐位相同的序列。
"""

import hashlib
from typing import Sequence, Tuple

import numpy as np

from .exceptions import ParameterError
from .tensor import ensure_tensor

LANES = 256
_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> Tuple[int, int]:
    """返回 (新状态, 输出)"""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, name: str) -> int:
    """由主 seed 和张量名派生子 seed（与平台无关）"""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256PlusPlus:
    """LANES 路并行的 xoshiro256++"""

    def __init__(self, seed: int, lanes: int = LANES):
        if lanes < 1:
            raise ParameterError(f"lanes 必须 >= 1: {lanes}")
        state = int(seed) & _MASK64
        words = []
        for _ in range(4 * lanes):
            state, out = splitmix64(state)
            words.append(out)
        table = np.array(words, dtype=np.uint64).reshape(lanes, 4)
        self.lanes = lanes
        self.s = [table[:, i].copy() for i in range(4)]

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        result = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self.s = [s0, s1, s2, _rotl(s3, 45)]
        return result

    def next_uint64(self, n: int) -> np.ndarray:
        """输出 n 个 64 位整数；每次调用按整步消耗状态"""
        if n < 0:
            raise ParameterError(f"n 必须 >= 0: {n}")
        steps = -(-n // self.lanes)
        out = np.empty((steps, self.lanes), dtype=np.uint64)
        for i in range(steps):
            out[i] = self._step()
        return out.reshape(-1)[:n]

    def uniform(self, n: int) -> np.ndarray:
        """(0, 1] 区间的 float64 均匀分布，取高 53 位"""
        bits = self.next_uint64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (2.0 ** -53)

    def standard_normal(self, n: int) -> np.ndarray:
        """Box-Muller 变换"""
        pairs = -(-n // 2)
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n]


def random_tensor(shape: Sequence[int], seed: int) -> np.ndarray:
    """标准正态随机张量"""
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape, dtype=np.int64))
    gen = Xoshiro256PlusPlus(seed)
    return ensure_tensor(gen.standard_normal(n).astype(np.float32).reshape(shape), name="random_tensor")


def truncated_normal(shape: Sequence[int], seed: int, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """截断正态：|z| > bound 的位置从同一序列重新抽样"""
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape, dtype=np.int64))
    gen = Xoshiro256PlusPlus(seed)
    z = gen.standard_normal(n)
    bad = np.flatnonzero(np.abs(z) > bound)
    while bad.size:
        z[bad] = gen.standard_normal(bad.size)
        bad = bad[np.abs(z[bad]) > bound]
    return ensure_tensor((z * std).astype(np.float32).reshape(shape), name="truncated_normal")


def init_parameter(name: str, shape: Sequence[int], seed: int) -> np.ndarray:
    """按参数名初始化：LayerNorm gamma 为 1，bias / beta 为 0，
    2 维投影权重为截断正态 (std 0.02)，卷积权重为 fan-in 缩放的正态"""
    shape = tuple(int(d) for d in shape)
    if name.endswith("gamma"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith("bias") or name.endswith("beta"):
        return np.zeros(shape, dtype=np.float32)
    sub_seed = derive_seed(seed, name)
    if len(shape) == 2:
        return truncated_normal(shape, sub_seed)
    if len(shape) in (3, 4):
        # (k, k, C) 逐通道卷积 fan_in = k*k；(k, k, C_in, C_out) 卷积 fan_in = k*k*C_in
        fan_in = shape[0] * shape[1] * (shape[2] if len(shape) == 4 else 1)
        std = np.sqrt(2.0 / fan_in)
        return (random_tensor(shape, sub_seed) * np.float32(std)).astype(np.float32)
    raise ParameterError(f"无法初始化参数 {name}，形状 {shape}")
