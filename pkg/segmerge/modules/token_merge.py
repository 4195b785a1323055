"""
Token 合并模块
二部软匹配（A·B^T 相似度）、均值合并、复制反合并，以及经典的按数量迭代合并。

约定：
- 合并后序列按"保留 token"（目标 token 与未合并的源 token）的原始展平下标升序排列，
  因此 r=0 时 MergeMap 就是恒等映射
- 合并时在 float64 中求和后除以组大小再转回 float32：对已经是组均值的副本再次合并得到原值
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Set, Tuple

import numpy as np

from ..core.config import check_rate, partition_for_rate
from ..core.exceptions import ParameterError, PolicyError, ShapeError
from ..core.log import log
from ..core.tensor import ensure_tensor, matmul

SIMILARITY_KINDS = ("dot", "cosine")
DEFAULT_CHUNK_ELEMENTS = 1 << 24


def lambda_from_rate(rate: float) -> float:
    """token 数缩减因子 λ = 1/(1-r)"""
    check_rate(rate)
    return 1.0 / (1.0 - rate)


@dataclass(frozen=True)
class MergePolicy:
    """合并率、目标区域边长与相似度类型"""
    rate: float
    partition_region: Optional[int] = None
    similarity_kind: str = "dot"

    def __post_init__(self):
        check_rate(self.rate)
        if self.partition_region is None:
            object.__setattr__(self, "partition_region", partition_for_rate(self.rate))
        s = self.partition_region
        if s < 2:
            raise PolicyError(f"partition_region 必须 >= 2: {s}")
        if 1.0 / (s * s) > 1.0 - self.rate + 1e-12:
            raise PolicyError(f"s={s} 时目标 token 过多，无法合并 r={self.rate} 的 token")
        if self.similarity_kind not in SIMILARITY_KINDS:
            raise ParameterError(f"未知相似度: {self.similarity_kind}，可选 {SIMILARITY_KINDS}")

    @property
    def lam(self) -> float:
        return lambda_from_rate(self.rate)

    def merge_count(self, n_tokens: int) -> int:
        return int(math.floor(self.rate * n_tokens + 1e-9))


@dataclass(frozen=True, eq=False)
class MergeMap:
    """合并映射：足以完成合并与反合并"""
    n_original: int
    n_merged: int
    dst_of: np.ndarray
    size_of: np.ndarray
    group_of: np.ndarray
    kept: np.ndarray
    grid: Optional[Tuple[int, int]] = None
    _order: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dst_of.shape != (self.n_original,) or self.size_of.shape != (self.n_merged,):
            raise ShapeError("MergeMap 数组长度与 token 数不一致")
        if self.size_of.min(initial=1) < 1 or int(self.size_of.sum()) != self.n_original:
            raise PolicyError("MergeMap 组大小必须 >= 1 且总和等于原 token 数")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.n_original:
            raise ShapeError(f"网格 {self.grid} 与 token 数 {self.n_original} 不一致")
        object.__setattr__(self, "_order", np.argsort(self.dst_of, kind="stable"))

    @classmethod
    def identity(cls, n: int, grid: Optional[Tuple[int, int]] = None,
                 group_of: Optional[np.ndarray] = None) -> "MergeMap":
        idx = np.arange(n, dtype=np.int64)
        groups = group_of if group_of is not None else np.full(n, "A")
        return cls(n, n, idx, np.ones(n, dtype=np.int64), groups, idx.copy(), grid)

    @property
    def is_identity(self) -> bool:
        return self.n_merged == self.n_original

    @property
    def n_sources_merged(self) -> int:
        return self.n_original - self.n_merged

    def merged_pairs(self) -> Set[Tuple[int, int]]:
        """(源 token 原始下标, 目标 token 原始下标) 集合"""
        rep = self.kept[self.dst_of]
        src = np.flatnonzero(rep != np.arange(self.n_original))
        return {(int(i), int(rep[i])) for i in src}


def _check_flat(tokens: np.ndarray) -> Tuple[np.ndarray, Optional[Tuple[int, int]]]:
    tokens = ensure_tensor(tokens, name="tokens")
    if tokens.ndim == 3:
        rows, cols, c = tokens.shape
        return tokens.reshape(rows * cols, c), (rows, cols)
    if tokens.ndim == 2:
        return tokens, None
    raise ShapeError(f"tokens 需要 (N, C) 或 (rows, cols, C)，实际 {tokens.shape}")


def _match(flat: np.ndarray, is_dst: np.ndarray, m: int, similarity_kind: str,
           grid: Optional[Tuple[int, int]], chunk_elements: int) -> MergeMap:
    n = flat.shape[0]
    group_of = np.where(is_dst, "A", "B")
    a_idx = np.flatnonzero(is_dst)
    b_idx = np.flatnonzero(~is_dst)
    if m > b_idx.size:
        raise PolicyError(f"需要合并 {m} 个 token，但源组只有 {b_idx.size} 个")
    if m == 0:
        return MergeMap.identity(n, grid, group_of)

    metric = flat
    if similarity_kind == "cosine":
        norms = np.linalg.norm(flat, axis=-1, keepdims=True)
        metric = (flat / np.maximum(norms, np.finfo(np.float32).tiny)).astype(np.float32)
    a_t = np.ascontiguousarray(metric[a_idx].T)
    b = metric[b_idx]

    # 分块计算每个源 token 的最佳目标，避免物化 |B|x|A| 分数矩阵
    best_score = np.empty(b_idx.size, dtype=np.float32)
    best_dst = np.empty(b_idx.size, dtype=np.int64)
    rows = max(1, chunk_elements // max(1, a_idx.size))
    for start in range(0, b_idx.size, rows):
        scores = matmul(b[start:start + rows], a_t, tag="similarity")
        arg = scores.argmax(axis=1)
        best_dst[start:start + rows] = arg
        best_score[start:start + rows] = scores[np.arange(arg.size), arg]

    # 分数降序，同分按源下标升序；argmax 已保证同分取较小的目标下标
    order = np.lexsort((b_idx, -best_score))[:m]
    sources = b_idx[order]
    targets = a_idx[best_dst[order]]

    rep = np.arange(n, dtype=np.int64)
    rep[sources] = targets
    kept = np.flatnonzero(rep == np.arange(n))
    slot = np.full(n, -1, dtype=np.int64)
    slot[kept] = np.arange(kept.size)
    dst_of = slot[rep]
    size_of = np.bincount(dst_of, minlength=kept.size).astype(np.int64)
    log.debug(f"bipartite matching: N={n} |A|={a_idx.size} |B|={b_idx.size} merged={m}")
    return MergeMap(n, int(kept.size), dst_of, size_of, group_of, kept, grid)


def destination_mask(rows: int, cols: int, s: int) -> np.ndarray:
    """每个 s×s 区域左上角为目标 token"""
    r = np.arange(rows) % s == 0
    c = np.arange(cols) % s == 0
    return (r[:, None] & c[None, :]).reshape(-1)


def bipartite_soft_matching(tokens: np.ndarray, policy: MergePolicy,
                            chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> MergeMap:
    """对 (rows, cols, C) 网格做二部软匹配，合并 floor(r·N) 个源 token"""
    tokens = ensure_tensor(tokens, ndim=3, name="tokens")
    rows, cols, c = tokens.shape
    flat = tokens.reshape(rows * cols, c)
    is_dst = destination_mask(rows, cols, policy.partition_region)
    m = policy.merge_count(rows * cols)
    return _match(flat, is_dst, m, policy.similarity_kind, (rows, cols), chunk_elements)


def merge(tokens: np.ndarray, merge_map: MergeMap, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """按组求均值（可选按 weights 加权），输出 (n_merged, C)"""
    flat, _ = _check_flat(tokens)
    if flat.shape[0] != merge_map.n_original:
        raise ShapeError(f"token 数 {flat.shape[0]} 与 MergeMap.n_original {merge_map.n_original} 不一致")
    if merge_map.is_identity and weights is None:
        return flat.copy()
    order = merge_map._order
    starts = np.concatenate(([0], np.cumsum(merge_map.size_of)[:-1]))
    values = flat[order].astype(np.float64)
    if weights is None:
        sums = np.add.reduceat(values, starts, axis=0)
        return (sums / merge_map.size_of[:, None]).astype(np.float32)
    w = np.asarray(weights, dtype=np.float64)[order]
    sums = np.add.reduceat(values * w[:, None], starts, axis=0)
    totals = np.add.reduceat(w, starts)
    return (sums / totals[:, None]).astype(np.float32)


def unmerge(merged: np.ndarray, merge_map: MergeMap) -> np.ndarray:
    """把每个合并 token 复制回它吸收的所有位置；有网格时恢复 2D 布局"""
    merged = ensure_tensor(merged, ndim=2, name="merged")
    if merged.shape[0] != merge_map.n_merged:
        raise ShapeError(f"合并序列长度 {merged.shape[0]} 与 MergeMap.n_merged {merge_map.n_merged} 不一致")
    out = merged[merge_map.dst_of]
    if merge_map.grid is not None:
        out = out.reshape(merge_map.grid[0], merge_map.grid[1], merged.shape[1])
    return out


def merge_by_quantity(tokens: np.ndarray, quantity: int, similarity_kind: str = "dot",
                      sizes: Optional[np.ndarray] = None,
                      chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> Tuple[np.ndarray, MergeMap]:
    """经典 ToMe 单步：偶数下标为 A、奇数下标为 B，合并 quantity 个 token，不反合并"""
    flat, _ = _check_flat(tokens)
    n = flat.shape[0]
    n_b = n // 2
    if quantity < 0 or (quantity > 0 and quantity >= n_b):
        raise ParameterError(f"reduction quantity {quantity} 必须满足 0 <= r̃ < |B| = {n_b}")
    if similarity_kind not in SIMILARITY_KINDS:
        raise ParameterError(f"未知相似度: {similarity_kind}")
    is_dst = np.arange(n) % 2 == 0
    merge_map = _match(flat, is_dst, int(quantity), similarity_kind, None, chunk_elements)
    return merge(flat, merge_map, weights=sizes), merge_map


def iterative_merge(tokens: np.ndarray, quantity: int, steps: int,
                    similarity_kind: str = "dot") -> Tuple[np.ndarray, np.ndarray]:
    """逐层重复 merge_by_quantity 并跟踪组大小（加权平均），返回 (tokens, sizes)"""
    flat, _ = _check_flat(tokens)
    if steps < 0:
        raise ParameterError(f"steps 必须 >= 0: {steps}")
    sizes = np.ones(flat.shape[0], dtype=np.float64)
    for step in range(steps):
        q = min(int(quantity), flat.shape[0] // 2 - 1)
        if q <= 0:
            log.debug(f"iterative merge 在第 {step} 步停止: 剩余 {flat.shape[0]} 个 token")
            break
        flat, merge_map = merge_by_quantity(flat, q, similarity_kind, sizes=sizes)
        sizes = np.bincount(merge_map.dst_of, weights=sizes, minlength=merge_map.n_merged)
    return flat, sizes
