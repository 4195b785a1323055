"""
注意力变体模块
vanilla / sra / tome_sd / neighbor2d / segformerpp 五种注意力，输入输出均为 (rows, cols, D) 的 TokenGrid。

约定：
- MergeMap 在投影前的特征上计算（x 或空间缩减后的 x），K 与 V 共用同一个映射
- 反合并发生在输出投影之后
- 残差连接由调用方在全分辨率上完成
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Type

import numpy as np

from ..core.config import VARIANTS, check_rate
from ..core.exceptions import ConfigError, ParameterError, ShapeError
from ..core.rng import init_parameter
from ..core.tensor import avgpool2d, conv2d, ensure_tensor, layernorm, linear, matmul, softmax_rows
from .token_merge import (DEFAULT_CHUNK_ELEMENTS, SIMILARITY_KINDS, MergeMap, MergePolicy,
                          bipartite_soft_matching, merge, unmerge)

SR_NORM_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    """单个注意力调用的参数"""
    heads: int = 1
    sr_ratio: int = 1
    r_q: float = 0.0
    r_kv: float = 0.0
    variant: str = "sra"
    proportional_attention: bool = False
    similarity_kind: str = "dot"
    chunk_elements: int = DEFAULT_CHUNK_ELEMENTS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"未知注意力变体: {self.variant}，可选 {VARIANTS}")
        if self.heads < 1 or self.sr_ratio < 1 or self.chunk_elements < 1:
            raise ConfigError(f"heads / sr_ratio / chunk_elements 必须为正: {self}")
        if self.similarity_kind not in SIMILARITY_KINDS:
            raise ConfigError(f"未知相似度: {self.similarity_kind}")
        try:
            check_rate(self.r_q, "r_q")
            check_rate(self.r_kv, "r_kv")
        except ParameterError as e:
            raise ConfigError(str(e)) from e
        if self.variant == "tome_sd" and self.r_q != self.r_kv:
            raise ConfigError(f"tome_sd 只有一个合并率，r_q ({self.r_q}) 必须等于 r_kv ({self.r_kv})")

    def check_dim(self, dim: int) -> int:
        if dim % self.heads:
            raise ConfigError(f"通道数 {dim} 不能被 heads {self.heads} 整除")
        return dim // self.heads


@dataclass(frozen=True)
class AttentionWeights:
    """注意力权重；线性层权重形状为 (D_in, D_out)，sr 卷积为 (R, R, D, D)"""
    q_w: np.ndarray
    q_b: np.ndarray
    kv_w: np.ndarray
    kv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    sr_w: Optional[np.ndarray] = None
    sr_b: Optional[np.ndarray] = None
    sr_norm_gamma: Optional[np.ndarray] = None
    sr_norm_beta: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.q_w.shape[0]

    @staticmethod
    def shapes(dim: int, sr_ratio: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {
            "q.weight": (dim, dim), "q.bias": (dim,),
            "kv.weight": (dim, 2 * dim), "kv.bias": (2 * dim,),
            "proj.weight": (dim, dim), "proj.bias": (dim,),
        }
        if sr_ratio > 1:
            shapes.update({
                "sr.weight": (sr_ratio, sr_ratio, dim, dim), "sr.bias": (dim,),
                "sr.norm.gamma": (dim,), "sr.norm.beta": (dim,),
            })
        return shapes

    @classmethod
    def from_dict(cls, weights: Dict[str, np.ndarray], prefix: str = "") -> "AttentionWeights":
        def get(name):
            return weights.get(prefix + name)
        return cls(
            q_w=get("q.weight"), q_b=get("q.bias"), kv_w=get("kv.weight"), kv_b=get("kv.bias"),
            proj_w=get("proj.weight"), proj_b=get("proj.bias"),
            sr_w=get("sr.weight"), sr_b=get("sr.bias"),
            sr_norm_gamma=get("sr.norm.gamma"), sr_norm_beta=get("sr.norm.beta"),
        )

    @classmethod
    def random(cls, dim: int, sr_ratio: int = 1, seed: int = 0) -> "AttentionWeights":
        params = {name: init_parameter(name, shape, seed) for name, shape in cls.shapes(dim, sr_ratio).items()}
        return cls.from_dict(params)


@dataclass(frozen=True)
class AttentionStats:
    """一次注意力调用的 token 计数与合并映射"""
    n_tokens: int
    n_queries: int
    n_kv: int
    q_map: Optional[MergeMap] = None
    kv_map: Optional[MergeMap] = None


def spatial_reduction(x: np.ndarray, weights: AttentionWeights, sr_ratio: int) -> np.ndarray:
    """步长为 R 的 RxR 卷积 + LayerNorm，K/V token 数变为 N/R²"""
    if sr_ratio == 1:
        return x
    rows, cols, _ = x.shape
    if rows % sr_ratio or cols % sr_ratio:
        raise ShapeError(f"网格 {rows}x{cols} 不能被 sr_ratio {sr_ratio} 整除")
    if weights.sr_w is None:
        raise ConfigError(f"sr_ratio={sr_ratio} 需要 sr 卷积权重")
    reduced = conv2d(x, weights.sr_w, weights.sr_b, stride=sr_ratio, padding=0)
    return layernorm(reduced, weights.sr_norm_gamma, weights.sr_norm_beta, eps=SR_NORM_EPS)


def attend(q_tokens: np.ndarray, kv_tokens: np.ndarray, weights: AttentionWeights, heads: int,
           kv_sizes: Optional[np.ndarray] = None,
           chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> np.ndarray:
    """多头注意力 + 输出投影；q_tokens (Nq, D)，kv_tokens (Nkv, D)"""
    n_q, dim = q_tokens.shape
    n_kv = kv_tokens.shape[0]
    head_dim = dim // heads
    scale = np.float32(head_dim ** -0.5)

    q = linear(q_tokens, weights.q_w, weights.q_b)
    kv = linear(kv_tokens, weights.kv_w, weights.kv_b)
    qh = np.ascontiguousarray(q.reshape(n_q, heads, head_dim).transpose(1, 0, 2))
    kt = np.ascontiguousarray(kv[:, :dim].reshape(n_kv, heads, head_dim).transpose(1, 2, 0))
    vh = np.ascontiguousarray(kv[:, dim:].reshape(n_kv, heads, head_dim).transpose(1, 0, 2))
    log_sizes = None
    if kv_sizes is not None:
        log_sizes = np.log(np.asarray(kv_sizes, dtype=np.float32))

    out = np.empty((heads, n_q, head_dim), dtype=np.float32)
    rows = max(1, chunk_elements // (heads * n_kv))
    for start in range(0, n_q, rows):
        logits = matmul(qh[:, start:start + rows], kt, tag="attention") * scale
        if log_sizes is not None:
            logits = logits + log_sizes
        out[:, start:start + rows] = matmul(softmax_rows(logits), vh, tag="attention")
    merged_heads = out.transpose(1, 0, 2).reshape(n_q, dim)
    return linear(merged_heads, weights.proj_w, weights.proj_b)


class AttentionBlock(ABC):
    """注意力变体基类"""

    def __init__(self, cfg: AttentionConfig):
        self.cfg = cfg

    @property
    @abstractmethod
    def variant(self) -> str:
        """变体名称"""
        pass

    @abstractmethod
    def forward_with_stats(self, x: np.ndarray, weights: AttentionWeights) -> Tuple[np.ndarray, AttentionStats]:
        """运行注意力并返回 token 计数"""
        pass

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = ensure_tensor(x, ndim=3)
        self.cfg.check_dim(x.shape[2])
        return x

    def _sizes(self, merge_map: Optional[MergeMap]) -> Optional[np.ndarray]:
        if merge_map is None or not self.cfg.proportional_attention:
            return None
        return merge_map.size_of

    def __call__(self, x: np.ndarray, weights: AttentionWeights) -> np.ndarray:
        out, _ = self.forward_with_stats(x, weights)
        return out


class VanillaAttention(AttentionBlock):
    """标准多头注意力，忽略 R 与合并率"""

    @property
    def variant(self) -> str:
        return "vanilla"

    def forward_with_stats(self, x, weights):
        x = self._prepare(x)
        rows, cols, dim = x.shape
        flat = x.reshape(rows * cols, dim)
        out = attend(flat, flat, weights, self.cfg.heads, chunk_elements=self.cfg.chunk_elements)
        return out.reshape(rows, cols, dim), AttentionStats(rows * cols, rows * cols, rows * cols)


class SpatialReductionAttention(AttentionBlock):
    """Segformer 的空间缩减注意力"""

    @property
    def variant(self) -> str:
        return "sra"

    def forward_with_stats(self, x, weights):
        x = self._prepare(x)
        rows, cols, dim = x.shape
        reduced = spatial_reduction(x, weights, self.cfg.sr_ratio)
        kv = reduced.reshape(-1, dim)
        out = attend(x.reshape(rows * cols, dim), kv, weights, self.cfg.heads,
                     chunk_elements=self.cfg.chunk_elements)
        return out.reshape(rows, cols, dim), AttentionStats(rows * cols, rows * cols, kv.shape[0])


class ToMeSDAttention(AttentionBlock):
    """Stable Diffusion 式 token 合并：一个映射同时用于 Q、K、V"""

    @property
    def variant(self) -> str:
        return "tome_sd"

    def forward_with_stats(self, x, weights):
        x = self._prepare(x)
        rows, cols, dim = x.shape
        policy = MergePolicy(self.cfg.r_q, similarity_kind=self.cfg.similarity_kind)
        merge_map = bipartite_soft_matching(x, policy, self.cfg.chunk_elements)
        tokens = merge(x, merge_map)
        out = attend(tokens, tokens, weights, self.cfg.heads, kv_sizes=self._sizes(merge_map),
                     chunk_elements=self.cfg.chunk_elements)
        stats = AttentionStats(rows * cols, merge_map.n_merged, merge_map.n_merged, merge_map, merge_map)
        return unmerge(out, merge_map), stats


class Neighbor2DAttention(AttentionBlock):
    """2D 邻域合并：查询做 2x2 平均池化，K/V 走空间缩减"""

    @property
    def variant(self) -> str:
        return "neighbor2d"

    def forward_with_stats(self, x, weights):
        x = self._prepare(x)
        rows, cols, dim = x.shape
        if rows % 2 or cols % 2:
            raise ShapeError(f"neighbor2d 需要偶数网格: {rows}x{cols}")
        kv = spatial_reduction(x, weights, self.cfg.sr_ratio).reshape(-1, dim)
        queries = avgpool2d(x, kernel=2, stride=2)
        out = attend(queries.reshape(-1, dim), kv, weights, self.cfg.heads,
                     chunk_elements=self.cfg.chunk_elements)
        out = out.reshape(rows // 2, cols // 2, dim)
        out = np.repeat(np.repeat(out, 2, axis=0), 2, axis=1)
        return out, AttentionStats(rows * cols, (rows // 2) * (cols // 2), kv.shape[0])


class SegformerPPAttention(AttentionBlock):
    """空间缩减之后再做 token 合并：K/V 用 r_kv，查询用 r_q"""

    @property
    def variant(self) -> str:
        return "segformerpp"

    def forward_with_stats(self, x, weights):
        x = self._prepare(x)
        rows, cols, dim = x.shape
        reduced = spatial_reduction(x, weights, self.cfg.sr_ratio)
        kv_map = bipartite_soft_matching(
            reduced, MergePolicy(self.cfg.r_kv, similarity_kind=self.cfg.similarity_kind), self.cfg.chunk_elements)
        kv_tokens = merge(reduced, kv_map)
        q_map = bipartite_soft_matching(
            x, MergePolicy(self.cfg.r_q, similarity_kind=self.cfg.similarity_kind), self.cfg.chunk_elements)
        q_tokens = merge(x, q_map)
        out = attend(q_tokens, kv_tokens, weights, self.cfg.heads, kv_sizes=self._sizes(kv_map),
                     chunk_elements=self.cfg.chunk_elements)
        stats = AttentionStats(rows * cols, q_map.n_merged, kv_map.n_merged, q_map, kv_map)
        return unmerge(out, q_map), stats


ATTENTION_BLOCKS: Dict[str, Type[AttentionBlock]] = {
    "vanilla": VanillaAttention,
    "sra": SpatialReductionAttention,
    "tome_sd": ToMeSDAttention,
    "neighbor2d": Neighbor2DAttention,
    "segformerpp": SegformerPPAttention,
}


def build_attention(cfg: AttentionConfig) -> AttentionBlock:
    return ATTENTION_BLOCKS[cfg.variant](cfg)


def _run(variant: str, x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    if cfg.variant != variant:
        cfg = AttentionConfig(**{**cfg.__dict__, "variant": variant})
    return build_attention(cfg)(x, weights)


def vanilla_attention(x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    return _run("vanilla", x, weights, cfg)


def sra_attention(x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    return _run("sra", x, weights, cfg)


def tome_sd_attention(x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    return _run("tome_sd", x, weights, cfg)


def neighbor2d_attention(x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    return _run("neighbor2d", x, weights, cfg)


def segformerpp_attention(x: np.ndarray, weights: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    return _run("segformerpp", x, weights, cfg)
