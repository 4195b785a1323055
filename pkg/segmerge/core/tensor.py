"""
张量核心模块
基于 numpy 的最小稠密张量引擎：matmul、行 softmax、卷积、池化、LayerNorm、GELU、双线性缩放，
以及用于校验 FLOP 公式的全局 MAC 计数器。

约定：
- Tensor 为 C 连续的 float32 ndarray，行主序
- 图像 / TokenGrid 布局为 (H, W, C)
"""

import math
import threading
from contextlib import contextmanager
from typing import Dict, Iterator, Optional, Sequence

import numpy as np

from .exceptions import NumericError, ParameterError, ShapeError

MAC_TAGS = ("attention", "similarity", "projection", "conv", "other")


def _check_tag(tag: str) -> None:
    if tag not in MAC_TAGS:
        raise ParameterError(f"未知的 MAC 标签: {tag}，可选 {MAC_TAGS}")


class MacCounter:
    """进程级 MAC 累加器（线程安全）"""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0
        self._by_tag: Dict[str, int] = {}

    def add(self, macs: int, tag: str = "other") -> None:
        if macs < 0:
            raise ParameterError(f"MAC 计数不能为负: {macs}")
        _check_tag(tag)
        with self._lock:
            self._total += int(macs)
            self._by_tag[tag] = self._by_tag.get(tag, 0) + int(macs)

    @property
    def macs(self) -> int:
        with self._lock:
            return self._total

    def tag_macs(self, tag: str) -> int:
        with self._lock:
            return self._by_tag.get(tag, 0)

    def snapshot(self) -> Dict:
        with self._lock:
            return {"total": self._total, "by_tag": dict(self._by_tag)}

    def reset(self) -> None:
        with self._lock:
            self._total = 0
            self._by_tag = {}


MAC_COUNTER = MacCounter()
_local = threading.local()


@contextmanager
def mac_counting(tag: str) -> Iterator[MacCounter]:
    """设置当前线程的默认 MAC 标签"""
    _check_tag(tag)
    previous = getattr(_local, "tag", None)
    _local.tag = tag
    try:
        yield MAC_COUNTER
    finally:
        _local.tag = previous


def _tag(tag: Optional[str]) -> str:
    return tag or getattr(_local, "tag", None) or "other"


def ensure_tensor(x, ndim: Optional[int] = None, name: str = "x") -> np.ndarray:
    """转换为 float32 连续张量并检查形状不变量"""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name} 的维度必须全部 >= 1: {arr.shape}")
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} 需要 {ndim} 维，实际为 {arr.shape}")
    return arr


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def matmul(a: np.ndarray, b: np.ndarray, tag: Optional[str] = None) -> np.ndarray:
    """矩阵乘 [..., M, K] x [..., K, P]，前导批维度需一致"""
    a = ensure_tensor(a, name="a")
    b = ensure_tensor(b, name="b")
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul 维度不匹配: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul 维度不匹配: {a.shape} x {b.shape}")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    m, k = a.shape[-2:]
    p = b.shape[-1]
    MAC_COUNTER.add(batch * m * k * p, _tag(tag))
    return np.matmul(a, b)


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
           tag: Optional[str] = "projection") -> np.ndarray:
    """逐 token 线性层，weight 形状 (D_in, D_out)"""
    x = ensure_tensor(x, name="x")
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), weight, tag=tag)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, out.shape[-1])


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """沿最后一维做 softmax（减最大值），非有限输入直接报错"""
    x = ensure_tensor(x, name="x")
    if not np.isfinite(x).all():
        raise NumericError("softmax_rows 输入包含 NaN 或 Inf")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _im2col(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(0, 1))
    windows = windows[: (out_h - 1) * stride + 1: stride, : (out_w - 1) * stride + 1: stride]
    # (H', W', C, k, k) -> (H'*W', k*k*C)，与权重 (k, k, C_in, C_out) 对齐
    return windows.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, -1)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, padding: int = 0, tag: Optional[str] = "conv") -> np.ndarray:
    """标准互相关卷积，x 为 (H, W, C_in)，weights 为 (k, k, C_in, C_out)"""
    x = ensure_tensor(x, ndim=3)
    weights = ensure_tensor(weights, ndim=4, name="weights")
    kernel = weights.shape[0]
    if weights.shape[1] != kernel or weights.shape[2] != x.shape[2]:
        raise ShapeError(f"卷积核形状 {weights.shape} 与输入 {x.shape} 不匹配")
    if stride < 1 or padding < 0:
        raise ParameterError(f"非法 stride/padding: {stride}/{padding}")
    h, w, c_in = x.shape
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    if h + 2 * padding < kernel or w + 2 * padding < kernel or out_h < 1 or out_w < 1:
        raise ShapeError(f"卷积核 {kernel} 大于填充后的输入 {x.shape} (padding={padding})")
    c_out = weights.shape[3]
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = _im2col(xp, kernel, stride, out_h, out_w)
    MAC_COUNTER.add(out_h * out_w * c_out * kernel * kernel * c_in, _tag(tag))
    out = np.matmul(cols, weights.reshape(-1, c_out))
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(out_h, out_w, c_out), dtype=np.float32)


def depthwise_conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
                     padding: int = 1, tag: Optional[str] = "conv") -> np.ndarray:
    """逐通道卷积（stride 1），weights 为 (k, k, C)"""
    x = ensure_tensor(x, ndim=3)
    weights = ensure_tensor(weights, ndim=3, name="weights")
    kernel = weights.shape[0]
    if weights.shape[1] != kernel or weights.shape[2] != x.shape[2]:
        raise ShapeError(f"逐通道卷积核 {weights.shape} 与输入 {x.shape} 不匹配")
    h, w, c = x.shape
    out_h = conv_output_size(h, kernel, 1, padding)
    out_w = conv_output_size(w, kernel, 1, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"卷积核 {kernel} 大于填充后的输入 {x.shape}")
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    out = np.zeros((out_h, out_w, c), dtype=np.float32)
    for i in range(kernel):
        for j in range(kernel):
            out += xp[i:i + out_h, j:j + out_w, :] * weights[i, j]
    MAC_COUNTER.add(out_h * out_w * c * kernel * kernel, _tag(tag))
    if bias is not None:
        out += bias
    return out


def avgpool2d(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    """不重叠平均池化（kernel == stride），要求 H、W 可整除"""
    x = ensure_tensor(x, ndim=3)
    if kernel != stride or kernel < 1:
        raise ParameterError(f"仅支持 kernel == stride 的池化: {kernel}/{stride}")
    h, w, c = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avgpool2d 需要 H、W 被 {kernel} 整除: {x.shape}")
    blocks = x.reshape(h // kernel, kernel, w // kernel, kernel, c)
    pooled = blocks.sum(axis=(1, 3), dtype=np.float64) / (kernel * kernel)
    return pooled.astype(np.float32)


def layernorm(x: np.ndarray, gamma: Optional[np.ndarray] = None, beta: Optional[np.ndarray] = None,
              eps: float = 1e-6) -> np.ndarray:
    """沿最后一维归一化；均值与方差用 float64 累加"""
    if eps <= 0:
        raise ParameterError(f"eps 必须 > 0: {eps}")
    x = ensure_tensor(x, name="x")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = (centered / np.sqrt(var + eps)).astype(np.float32)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU（tanh 近似）"""
    x = ensure_tensor(x, name="x")
    return (0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))).astype(np.float32)


def _source_coords(out_size: int, in_size: int):
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    t = (src - lo).astype(np.float32)
    return lo, hi, t


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """双线性缩放（半像素中心），插值写成 a + t*(b - a)，常数场保持精确"""
    x = ensure_tensor(x, ndim=3)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"目标尺寸非法: {out_h}x{out_w}")
    h, w, _ = x.shape
    y0, y1, ty = _source_coords(out_h, h)
    a, b = x[y0], x[y1]
    rows = a + ty[:, None, None] * (b - a)
    x0, x1, tx = _source_coords(out_w, w)
    a, b = rows[:, x0], rows[:, x1]
    return np.ascontiguousarray(a + tx[None, :, None] * (b - a), dtype=np.float32)


def shape_str(shape: Sequence[int]) -> str:
    return "x".join(str(int(d)) for d in shape)
