"""
注意力复杂度的解析代价模型

两类数字：
- 公式值：vanilla 代价取 2·N²·D（QK^T 与 attn·V 两次矩阵乘），其余变体为 vanilla 代价乘以各自的系数，
  reduction factor 为系数的倒数
- 精确计数：按实现中的取整 token 数计算 attention / similarity / projection+conv MAC，
  与 tensor 模块的 MacCounter 逐项相等

softmax 与反合并的代价不计入。
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

from ..core.config import VARIANTS, ModelConfig, check_rate, partition_for_rate
from ..core.exceptions import ConfigError, ParameterError
from .encoder import MLP_RATIO
from .token_merge import MergePolicy, lambda_from_rate

MATCHING_OVERHEAD = 0.25
COST_NOTE = "softmax 与 unmerge 的代价未计入；linear_macs（投影、卷积、FFN、解码头）不参与 reduction factor"


def _check_nd(n: int, d: int) -> None:
    if n < 1 or d < 1:
        raise ParameterError(f"N 与 D 必须 >= 1: N={n}, D={d}")


def _check_r(r: int) -> None:
    if r < 1:
        raise ParameterError(f"R 必须 >= 1: {r}")


def cost_vanilla(n: int, d: int) -> int:
    """2·N²·D"""
    _check_nd(n, d)
    return 2 * n * n * d


def sra_factor(r: int) -> float:
    _check_r(r)
    return float(r * r)


def cost_sra(n: int, d: int, r: int) -> float:
    return cost_vanilla(n, d) / sra_factor(r)


def tome_sd_coefficient(rate: float) -> float:
    lam = lambda_from_rate(rate)
    return lam ** -2 + MATCHING_OVERHEAD


def tome_sd_factor(rate: float) -> float:
    return 1.0 / tome_sd_coefficient(rate)


def cost_tome_sd(n: int, d: int, rate: float) -> float:
    return cost_vanilla(n, d) * tome_sd_coefficient(rate)


def segformerpp_coefficient(r: int, r_q: float, r_kv: float) -> float:
    """1/(λ_kv·λ_q·R²) + 0.25·(1 + R⁴)/R⁴"""
    _check_r(r)
    lam_q = lambda_from_rate(r_q)
    lam_kv = lambda_from_rate(r_kv)
    r2 = float(r * r)
    r4 = r2 * r2
    return 1.0 / (lam_kv * lam_q * r2) + MATCHING_OVERHEAD * (1.0 + r4) / r4


def segformerpp_factor(r: int, r_q: float, r_kv: float) -> float:
    return 1.0 / segformerpp_coefficient(r, r_q, r_kv)


def cost_segformerpp(n: int, d: int, r: int, r_q: float, r_kv: float) -> float:
    return cost_vanilla(n, d) * segformerpp_coefficient(r, r_q, r_kv)


def _stage_coefficients(variant: str, r: int, r_q: float, r_kv: float) -> Tuple[float, float]:
    """返回 (含匹配开销的系数, 仅注意力矩阵乘的系数)；合并率为 0 的路径不做匹配，也不计开销"""
    if variant == "vanilla":
        return 1.0, 1.0
    if variant == "sra":
        return 1.0 / (r * r), 1.0 / (r * r)
    if variant == "neighbor2d":
        return 1.0 / (4 * r * r), 1.0 / (4 * r * r)
    if variant == "tome_sd":
        lam = lambda_from_rate(r_q)
        core = lam ** -2
        return core + (MATCHING_OVERHEAD if r_q > 0 else 0.0), core
    if variant == "segformerpp":
        core = 1.0 / (lambda_from_rate(r_q) * lambda_from_rate(r_kv) * r * r)
        overhead = (MATCHING_OVERHEAD if r_q > 0 else 0.0) + (MATCHING_OVERHEAD / r ** 4 if r_kv > 0 else 0.0)
        return core + overhead, core
    raise ConfigError(f"未知注意力变体: {variant}")


def _merged_count(n: int, rate: float) -> int:
    return n - MergePolicy(rate).merge_count(n)


def _similarity_macs(rows: int, cols: int, d: int, rate: float) -> int:
    """|A|·|B|·D；目标为每个 s×s 区域左上角"""
    if MergePolicy(rate).merge_count(rows * cols) == 0:
        return 0
    s = partition_for_rate(rate)
    n_dst = math.ceil(rows / s) * math.ceil(cols / s)
    return n_dst * (rows * cols - n_dst) * d


@dataclass(frozen=True)
class StageCost:
    """单个阶段（depth 个 block 合计）"""
    index: int
    rows: int
    cols: int
    dim: int
    depth: int
    sr_ratio: int
    r_q: float
    r_kv: float
    n_tokens: int
    n_queries: int
    n_kv: int
    dominant_macs: float
    factor: float
    attention_factor: float
    attention_macs: int
    similarity_macs: int
    linear_macs: int


@dataclass(frozen=True)
class CostReport:
    """整模型代价；reduction_factor 相对于同结构的全 vanilla 模型"""
    variant: str
    height: int
    width: int
    n_tokens: int
    dim: int
    dominant_macs: float
    reduction_factor: float
    attention_factor: float
    per_stage_breakdown: List[float]
    attention_macs: int
    similarity_macs: int
    linear_macs: int
    stages: List[StageCost] = field(default_factory=list)
    note: str = COST_NOTE

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _stage_cost(config: ModelConfig, index: int, height: int, width: int, prev_dim: int) -> StageCost:
    stage = config.stages[index]
    variant = config.variant
    rows, cols = ModelConfig.stage_grid(height, width, index)
    n = rows * cols
    d = stage.channels
    r = stage.sr_ratio
    reduced_rows, reduced_cols = rows // r, cols // r

    # 各变体实际进入注意力的 token 数（按实现取整）
    uses_sr = variant in ("sra", "neighbor2d", "segformerpp") and r > 1
    if variant == "vanilla":
        n_q, n_kv = n, n
    elif variant == "sra":
        n_q, n_kv = n, reduced_rows * reduced_cols
    elif variant == "tome_sd":
        n_q = n_kv = _merged_count(n, stage.r_q)
    elif variant == "neighbor2d":
        n_q, n_kv = n // 4, reduced_rows * reduced_cols
    else:
        n_q = _merged_count(n, stage.r_q)
        n_kv = _merged_count(reduced_rows * reduced_cols, stage.r_kv)

    similarity = 0
    if variant == "tome_sd":
        similarity = _similarity_macs(rows, cols, d, stage.r_q)
    elif variant == "segformerpp":
        similarity = (_similarity_macs(rows, cols, d, stage.r_q)
                      + _similarity_macs(reduced_rows, reduced_cols, d, stage.r_kv))

    hidden = MLP_RATIO * d
    per_block_linear = (
        n_q * d * d                      # q
        + n_kv * d * 2 * d               # kv
        + n_q * d * d                    # proj
        + (n * d * d if uses_sr else 0)  # sr conv: (N/R²)·D·R²·D
        + n * d * hidden                 # fc1
        + n * hidden * 9                 # dwconv
        + n * hidden * d                 # fc2
    )
    kernel = 7 if index == 0 else 3
    embed = n * d * kernel * kernel * prev_dim

    coef, attn_coef = _stage_coefficients(variant, r, stage.r_q, stage.r_kv)
    return StageCost(
        index=index + 1, rows=rows, cols=cols, dim=d, depth=stage.depth, sr_ratio=r,
        r_q=stage.r_q, r_kv=stage.r_kv, n_tokens=n, n_queries=n_q, n_kv=n_kv,
        dominant_macs=stage.depth * cost_vanilla(n, d) * coef,
        factor=1.0 / coef,
        attention_factor=1.0 / attn_coef,
        attention_macs=stage.depth * 2 * n_q * n_kv * d,
        similarity_macs=stage.depth * similarity,
        linear_macs=stage.depth * per_block_linear + embed,
    )


def model_cost(config: ModelConfig, height: int, width: int) -> CostReport:
    """逐阶段累加主导注意力项；N_i = (H/2^{i+1})·(W/2^{i+1})"""
    ModelConfig.check_input(height, width)
    if config.variant not in VARIANTS:
        raise ConfigError(f"未知注意力变体: {config.variant}")
    for stage in config.stages:
        check_rate(stage.r_q, "r_q")
        check_rate(stage.r_kv, "r_kv")

    stages: List[StageCost] = []
    prev = 3
    for i, stage in enumerate(config.stages):
        stages.append(_stage_cost(config, i, height, width, prev))
        prev = stage.channels

    # 解码头：各阶段投影到 E，1x1 融合，分类投影
    e = config.decoder_dim
    head = sum(s.n_tokens * s.dim * e for s in stages)
    head += stages[0].n_tokens * (len(stages) * e * e + e * config.num_classes)

    vanilla_total = sum(s.depth * cost_vanilla(s.n_tokens, s.dim) for s in stages)
    dominant = sum(s.dominant_macs for s in stages)
    attention_core = sum(s.depth * cost_vanilla(s.n_tokens, s.dim) / s.attention_factor for s in stages)
    return CostReport(
        variant=config.variant,
        height=height,
        width=width,
        n_tokens=stages[0].n_tokens,
        dim=stages[0].dim,
        dominant_macs=dominant,
        reduction_factor=vanilla_total / dominant,
        attention_factor=vanilla_total / attention_core,
        per_stage_breakdown=[s.dominant_macs for s in stages],
        attention_macs=sum(s.attention_macs for s in stages),
        similarity_macs=sum(s.similarity_macs for s in stages),
        linear_macs=sum(s.linear_macs for s in stages) + head,
        stages=stages,
    )


def format_cost_report(report: CostReport) -> str:
    """结构化文本报告，包含逐阶段表格"""
    lines = [
        f"variant: {report.variant}",
        f"input: {report.height}x{report.width}",
        f"stage1 tokens N: {report.n_tokens}, D: {report.dim}",
        f"dominant_macs: {report.dominant_macs:,.0f}",
        f"reduction_factor: {report.reduction_factor:.4f}",
        f"attention_factor: {report.attention_factor:.4f}",
        f"attention_macs: {report.attention_macs:,}",
        f"similarity_macs: {report.similarity_macs:,}",
        f"linear_macs: {report.linear_macs:,}",
        "",
        "| stage | grid | D | depth | R | r_q | r_kv | N | N_q | N_kv | dominant_macs | factor |",
        "|-------|------|---|-------|---|-----|------|---|-----|------|---------------|--------|",
    ]
    for s in report.stages:
        lines.append(
            f"| {s.index} | {s.rows}x{s.cols} | {s.dim} | {s.depth} | {s.sr_ratio} | {s.r_q:g} | {s.r_kv:g} "
            f"| {s.n_tokens} | {s.n_queries} | {s.n_kv} | {s.dominant_macs:,.0f} | {s.factor:.4f} |"
        )
    lines += ["", f"note: {report.note}"]
    return "\n".join(lines)
