"""
基准测试模块
单次 bench、变体 x 分辨率 sweep、解析代价报告与权重生成。

speedup = t_orig / t_mod，t_orig 为同一次调用中测得的原始 Segformer（sra）延迟。
计时只覆盖 forward：模型构建与输入生成在计时区之外，由 PhaseTimer 记录。
"""

import csv
import io
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from ..core.config import PRESETS, ModelConfig, check_rate, partition_for_rate
from ..core.exceptions import ConfigError, ParameterError, PolicyError, SegMergeError
from ..core.log import log
from ..core.report_generator import BenchReportGenerator
from ..core.rng import random_tensor
from ..core.tensor import bilinear_resize
from ..core.utils import SegMergeUtils
from .cost_model import CostReport, format_cost_report, model_cost
from .encoder import MixTransformer, init_weights
from .model_io import save_model_config, save_weights
from .token_merge import DEFAULT_CHUNK_ELEMENTS, MergePolicy

BENCH_VARIANTS = ("original", "vanilla", "sra", "tome_sd", "neighbor2d", "segformerpp", "downsample")
CSV_COLUMNS = ("variant", "H", "W", "median_s", "speedup")
MIN_REPS = 3
DEFAULT_TOME_RATE = 0.5
DEFAULT_PRESET = "hq"


class PhaseTimer:
    """阶段计时：build / input / warmup / timed，允许同名阶段出现多次"""

    def __init__(self):
        self.events: List[Dict[str, Any]] = []
        self.total_start_time = time.perf_counter()

    def start(self, name: str) -> Dict[str, Any]:
        event = {"name": name, "start": time.perf_counter(), "end": None, "duration": None, "status": "running"}
        self.events.append(event)
        return event

    def end(self, event: Dict[str, Any], status: str = "completed") -> None:
        event["end"] = time.perf_counter()
        event["duration"] = event["end"] - event["start"]
        event["status"] = status

    @contextmanager
    def phase(self, name: str) -> Iterator[Dict[str, Any]]:
        event = self.start(name)
        try:
            yield event
        except Exception:
            self.end(event, status="failed")
            raise
        self.end(event)

    def spans(self, name: str) -> List[Tuple[float, float]]:
        return [(e["start"], e["end"]) for e in self.events if e["name"] == name]

    def print_summary(self) -> None:
        total = time.perf_counter() - self.total_start_time
        log.info(f"📊 阶段耗时（总计 {total:.2f} 秒）")
        for e in self.events:
            icon = "✅" if e["status"] == "completed" else "❌" if e["status"] == "failed" else "⏳"
            log.info(f"{icon} {e['name']}: {(e['duration'] or 0.0):.4f} 秒")


@dataclass(frozen=True)
class VariantSpec:
    """bench 变体标签解析结果，例如 segformerpp:fast"""
    label: str
    name: str
    preset: Optional[str] = None
    rate: Optional[float] = None

    @property
    def is_original(self) -> bool:
        return self.name == "original"


def parse_variant(label: str, preset: Optional[str] = None, rate: Optional[float] = None) -> VariantSpec:
    """解析 variant[:preset|rate]；segformerpp 默认 hq 预设，tome_sd 默认合并率 0.5"""
    name, _, suffix = label.strip().partition(":")
    name = name.lower()
    if name not in BENCH_VARIANTS:
        raise ConfigError(f"未知 bench 变体: {label}，可选 {BENCH_VARIANTS}")
    if name == "segformerpp":
        chosen = (suffix or preset or DEFAULT_PRESET).lower()
        if chosen not in PRESETS:
            raise ConfigError(f"未知预设: {chosen}，可选 {sorted(PRESETS)}")
        return VariantSpec(f"segformerpp:{chosen}", name, preset=chosen)
    if name == "tome_sd":
        try:
            value = float(suffix) if suffix else (DEFAULT_TOME_RATE if rate is None else float(rate))
            check_rate(value, "rate")
        except (ValueError, ParameterError) as e:
            raise ConfigError(f"tome_sd 合并率非法: {label} ({e})") from e
        return VariantSpec(f"tome_sd:{value:g}", name, rate=value)
    if suffix:
        raise ConfigError(f"变体 {name} 不接受后缀: {label}")
    return VariantSpec(name, name)


def variant_config(spec: VariantSpec, base: ModelConfig) -> ModelConfig:
    if spec.name in ("original", "sra", "downsample"):
        return base.with_variant("sra")
    if spec.name == "segformerpp":
        return base.with_variant("segformerpp", preset=spec.preset)
    if spec.name == "tome_sd":
        return base.with_variant("tome_sd", rate=spec.rate)
    return base.with_variant(spec.name)


def check_feasible(config: ModelConfig, height: int, width: int) -> None:
    """计时之前检查每个阶段的网格可整除性与合并策略可行性"""
    ModelConfig.check_input(height, width)
    for i, stage in enumerate(config.stages):
        rows, cols = ModelConfig.stage_grid(height, width, i)
        r = stage.sr_ratio
        if config.variant in ("sra", "neighbor2d", "segformerpp") and (rows % r or cols % r):
            raise ConfigError(f"阶段 {i + 1} 网格 {rows}x{cols} 不能被 sr_ratio {r} 整除")
        if config.variant == "neighbor2d" and (rows % 2 or cols % 2):
            raise ConfigError(f"阶段 {i + 1} 网格 {rows}x{cols} 不是偶数，无法做 2x2 查询池化")
        paths = []
        if config.variant == "tome_sd":
            paths.append((rows, cols, stage.r_q))
        elif config.variant == "segformerpp":
            paths += [(rows, cols, stage.r_q), (rows // r, cols // r, stage.r_kv)]
        for p_rows, p_cols, rate in paths:
            try:
                policy = MergePolicy(rate)
            except (PolicyError, ParameterError) as e:
                raise ConfigError(f"阶段 {i + 1}: {e}") from e
            s = partition_for_rate(rate)
            n_dst = math.ceil(p_rows / s) * math.ceil(p_cols / s)
            if policy.merge_count(p_rows * p_cols) > p_rows * p_cols - n_dst:
                raise ConfigError(f"阶段 {i + 1}: {p_rows}x{p_cols} 网格上无法合并 r={rate} 的 token")


def _check_cell(spec: VariantSpec, base: ModelConfig, height: int, width: int) -> ModelConfig:
    config = variant_config(spec, base)
    check_feasible(base.with_variant("sra"), height, width)
    if spec.name == "downsample":
        if (height // 2) % 64 or (width // 2) % 64:
            raise ConfigError(f"downsample 需要 H/2、W/2 为 64 的倍数: {height}x{width}")
        check_feasible(config, height // 2, width // 2)
    else:
        check_feasible(config, height, width)
    return config


def build_forward(spec: VariantSpec, config: ModelConfig, weights, height: int, width: int,
                  chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> Callable[[np.ndarray], np.ndarray]:
    """返回 image -> 1/4 分辨率 logits 的前向函数"""
    model = MixTransformer(config, weights, chunk_elements)
    if spec.name != "downsample":
        return model

    half_h, half_w = height // 2, width // 2
    out_h, out_w = height // 4, width // 4

    def forward(image: np.ndarray) -> np.ndarray:
        logits = model(bilinear_resize(image, half_h, half_w))
        return bilinear_resize(logits, out_h, out_w)

    return forward


def time_forward(forward: Callable[[np.ndarray], np.ndarray], image: np.ndarray, warmup: int, reps: int,
                 timer: PhaseTimer, threads: int = 1, prefix: str = "") -> float:
    """预热后计时 reps 次，返回中位数（秒）"""
    with threadpool_limits(limits=threads):
        with timer.phase(prefix + "warmup"):
            for _ in range(warmup):
                forward(image)
        times = []
        with timer.phase(prefix + "timed"):
            for _ in range(reps):
                t0 = time.perf_counter()
                forward(image)
                times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass(frozen=True)
class BenchmarkRecord:
    """一次 bench 的测量结果"""
    variant: str
    height: int
    width: int
    warmup_runs: int
    timed_runs: int
    median_s: float
    t_orig: float
    speedup: float

    def __post_init__(self):
        if self.timed_runs < MIN_REPS:
            raise ParameterError(f"timed_runs 必须 >= {MIN_REPS}: {self.timed_runs}")
        if not (self.median_s > 0 and self.t_orig > 0):
            raise ParameterError(f"延迟必须 > 0: median_s={self.median_s}, t_orig={self.t_orig}")

    @classmethod
    def measured(cls, variant: str, height: int, width: int, warmup: int, reps: int,
                 t_mod: float, t_orig: Optional[float] = None) -> "BenchmarkRecord":
        """t_orig 为空时即为基线本身，speedup 恰为 1.0"""
        if t_orig is None:
            return cls(variant, height, width, warmup, reps, t_mod, t_mod, 1.0)
        return cls(variant, height, width, warmup, reps, t_mod, t_orig, t_orig / t_mod)

    def csv_row(self) -> List[str]:
        return [self.variant, str(self.height), str(self.width), f"{self.median_s:.6f}", f"{self.speedup:.4f}"]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_runs(warmup: int, reps: int, threads: int) -> None:
    if reps < MIN_REPS:
        raise ParameterError(f"reps 必须 >= {MIN_REPS}: {reps}")
    if warmup < 0:
        raise ParameterError(f"warmup 必须 >= 0: {warmup}")
    if threads < 1:
        raise ParameterError(f"threads 必须 >= 1: {threads}")


def bench(variant: str, height: int, width: int, seed: int = 0, warmup: int = 3, reps: int = 10,
          threads: int = 1, preset: Optional[str] = None, rate: Optional[float] = None,
          base_config: Optional[ModelConfig] = None, chunk_elements: int = DEFAULT_CHUNK_ELEMENTS,
          timer: Optional[PhaseTimer] = None,
          baseline_cache: Optional[Dict[Tuple[int, int], float]] = None) -> BenchmarkRecord:
    """构建种子模型与输入，预热后取 reps 次 forward 的中位数；非 original 变体在同一次调用中测基线"""
    _check_runs(warmup, reps, threads)
    spec = parse_variant(variant, preset=preset, rate=rate)
    base = base_config or ModelConfig.toy()
    timer = timer or PhaseTimer()

    config = _check_cell(spec, base, height, width)
    original_config = base.with_variant("sra")

    log.info(f"⏱️ bench {spec.label} @ {height}x{width} (warmup={warmup}, reps={reps}, threads={threads})")
    with timer.phase("build"):
        weights = init_weights(base, seed)
        forward = build_forward(spec, config, weights, height, width, chunk_elements)
        baseline = None
        if not spec.is_original:
            baseline = build_forward(VariantSpec("original", "original"), original_config, weights,
                                     height, width, chunk_elements)
    with timer.phase("input"):
        image = random_tensor((height, width, 3), seed)

    t_orig = None
    if baseline is not None:
        key = (height, width)
        if baseline_cache is not None and key in baseline_cache:
            t_orig = baseline_cache[key]
        else:
            t_orig = time_forward(baseline, image, warmup, reps, timer, threads, prefix="baseline_")
            if baseline_cache is not None:
                baseline_cache[key] = t_orig
    t_mod = time_forward(forward, image, warmup, reps, timer, threads)
    if spec.is_original and baseline_cache is not None:
        baseline_cache[(height, width)] = t_mod

    record = BenchmarkRecord.measured(spec.label, height, width, warmup, reps, t_mod, t_orig)
    log.info(f"✅ {spec.label} {height}x{width}: median {record.median_s * 1000:.2f} ms, speedup {record.speedup:.3f}")
    return record


def records_to_csv(records: Sequence[BenchmarkRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(CSV_COLUMNS)
    for record in records:
        writer.writerow(record.csv_row())
    return buffer.getvalue()


def sweep(variants: Sequence[str], resolutions: Sequence[Tuple[int, int]], out_path: str, seed: int = 0,
          warmup: int = 3, reps: int = 10, threads: int = 1, preset: Optional[str] = None,
          rate: Optional[float] = None, base_config: Optional[ModelConfig] = None,
          chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> List[BenchmarkRecord]:
    """变体 x 分辨率笛卡尔积，行序为变体外层、分辨率内层；写出 CSV、JSON 与 Markdown 报告"""
    _check_runs(warmup, reps, threads)
    specs = [parse_variant(v, preset=preset, rate=rate) for v in variants]
    cells = [(spec, int(h), int(w)) for spec in specs for h, w in resolutions]
    if not cells:
        raise ConfigError("sweep 至少需要一个变体和一个分辨率")

    # 计时开始前检查所有单元
    base = base_config or ModelConfig.toy()
    for spec, h, w in cells:
        _check_cell(spec, base, h, w)

    report = BenchReportGenerator({"seed": seed, "warmup": warmup, "reps": reps, "threads": threads})
    baselines: Dict[Tuple[int, int], float] = {}
    records: List[BenchmarkRecord] = []
    for spec, h, w in tqdm(cells, desc="sweep", unit="cell"):
        cell = f"{spec.label}@{h}x{w}"
        report.record_cell_start(cell)
        try:
            record = bench(spec.label, h, w, seed=seed, warmup=warmup, reps=reps, threads=threads,
                           base_config=base, chunk_elements=chunk_elements, baseline_cache=baselines)
        except SegMergeError as e:
            report.record_cell_end(cell, {"status": "failed", "error": str(e)})
            raise
        report.record_cell_end(cell, {"status": "completed", **record.to_dict()})
        records.append(record)

    SegMergeUtils.save_text_file(out_path, records_to_csv(records))
    json_path = os.path.splitext(out_path)[0] + ".json"
    SegMergeUtils.save_json_file(json_path, {
        "seed": seed, "warmup": warmup, "reps": reps, "threads": threads,
        "records": [r.to_dict() for r in records],
    })
    report_path = report.generate_report(os.path.dirname(os.path.abspath(out_path)))
    SegMergeUtils.describe_files({"CSV": out_path, "JSON": json_path, "报告": report_path})
    return records


def cost(config: ModelConfig, height: int, width: int) -> Tuple[CostReport, str]:
    """返回 (CostReport, 结构化文本)"""
    report = model_cost(config, height, width)
    return report, format_cost_report(report)


def gen_weights(output_dir: str, name: str = "model", seed: int = 0,
                config: Optional[ModelConfig] = None) -> Dict[str, str]:
    """写出种子玩具模型的清单、权重与配置"""
    config = config or ModelConfig.toy()
    manifest_path, blob_path = save_weights(init_weights(config, seed), output_dir, name)
    config_path = save_model_config(config, SegMergeUtils.config_file_path(output_dir, name))
    paths = {"manifest": manifest_path, "weights": blob_path, "config": config_path}
    SegMergeUtils.describe_files(paths)
    return paths
