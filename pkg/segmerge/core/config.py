"""
配置管理模块
- BenchConfig: bench.yaml 运行配置
- StageSpec / ModelConfig: 玩具 MiT 编码器的结构与各阶段合并率
"""

import copy
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .exceptions import ConfigError, ParameterError, ShapeError

VARIANTS = ("vanilla", "sra", "tome_sd", "neighbor2d", "segformerpp")

# 各阶段 (r_q, r_kv)，Segformer++ HQ / fast
PRESETS: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "hq": ((0.0, 0.6), (0.0, 0.6), (0.8, 0.0), (0.8, 0.0)),
    "fast": ((0.0, 0.9), (0.0, 0.9), (0.9, 0.0), (0.9, 0.0)),
}

# 阶段 1 下采样 4 倍，其后每阶段 2 倍；输入边长需被 64 整除
PATCH_STRIDES = (4, 2, 2, 2)
INPUT_MULTIPLE = 64

DEFAULTS: Dict[str, Any] = {
    "project": {"name": "segmerge", "output_dir": "output"},
    "model": {
        "channels": [32, 64, 160, 256],
        "depths": [2, 2, 2, 2],
        "heads": [1, 2, 5, 8],
        "sr_ratios": [8, 4, 2, 1],
        "num_classes": 19,
        "decoder_dim": 64,
        "proportional_attention": False,
    },
    "bench": {
        "warmup": 3,
        "reps": 10,
        "seed": 0,
        "threads": 1,
        "tome_rate": 0.5,
        "resolutions": [[512, 512], [640, 640], [1024, 1024], [2048, 1024]],
        "variants": ["original", "segformerpp:hq", "segformerpp:fast", "neighbor2d", "downsample"],
    },
    "attention": {"chunk_elements": 1 << 24},
    "logging": {"level": "INFO", "file": "segmerge.log", "rotation": "50 MB"},
}


def _deep_merge(base: Dict, override: Dict) -> Dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def check_rate(rate: float, name: str = "r") -> float:
    if not (0.0 <= rate < 1.0):
        raise ParameterError(f"{name} 必须位于 [0, 1): {rate}")
    return float(rate)


def partition_for_rate(rate: float) -> int:
    """每个 s×s 区域取一个目标 token，s = ceil(1/sqrt(1-r))，至少为 2"""
    check_rate(rate)
    return max(2, math.ceil(1.0 / math.sqrt(1.0 - rate) - 1e-12))


@dataclass(frozen=True)
class StageSpec:
    """单个金字塔阶段"""
    channels: int
    depth: int
    heads: int
    sr_ratio: int
    r_q: float = 0.0
    r_kv: float = 0.0

    def validate(self, index: int = 0) -> None:
        if self.channels < 1 or self.depth < 1 or self.heads < 1 or self.sr_ratio < 1:
            raise ConfigError(f"阶段 {index + 1} 参数必须为正: {self}")
        if self.channels % self.heads:
            raise ConfigError(f"阶段 {index + 1}: channels {self.channels} 不能被 heads {self.heads} 整除")
        try:
            check_rate(self.r_q, "r_q")
            check_rate(self.r_kv, "r_kv")
        except ParameterError as e:
            raise ConfigError(f"阶段 {index + 1}: {e}") from e


@dataclass(frozen=True)
class ModelConfig:
    """四阶段玩具 MiT 配置"""
    stages: Tuple[StageSpec, ...]
    variant: str = "sra"
    num_classes: int = 19
    decoder_dim: int = 64
    proportional_attention: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if len(self.stages) != len(PATCH_STRIDES):
            raise ConfigError(f"需要 {len(PATCH_STRIDES)} 个阶段，实际 {len(self.stages)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"未知注意力变体: {self.variant}，可选 {VARIANTS}")
        if self.num_classes < 1 or self.decoder_dim < 1:
            raise ConfigError("num_classes / decoder_dim 必须为正")
        for i, stage in enumerate(self.stages):
            stage.validate(i)
            if self.variant == "tome_sd" and stage.r_q != stage.r_kv:
                raise ConfigError(f"tome_sd 需要 r_q == r_kv，阶段 {i + 1}: {stage.r_q} != {stage.r_kv}")

    @property
    def channels(self) -> List[int]:
        return [s.channels for s in self.stages]

    @staticmethod
    def check_input(height: int, width: int) -> None:
        if height < INPUT_MULTIPLE or width < INPUT_MULTIPLE or height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise ShapeError(f"输入尺寸 {height}x{width} 必须是 {INPUT_MULTIPLE} 的正整数倍")

    @staticmethod
    def stage_grid(height: int, width: int, index: int) -> Tuple[int, int]:
        """阶段 index (0 起) 的特征图尺寸 H/2^{i+2} x W/2^{i+2}"""
        div = 4 * (2 ** index)
        return height // div, width // div

    def with_variant(self, variant: str, preset: Optional[str] = None, rate: Optional[float] = None,
                     sr_ratios: Optional[Sequence[int]] = None) -> "ModelConfig":
        """派生新配置：切换变体并套用预设或单一合并率"""
        stages = list(self.stages)
        if preset is not None:
            table = resolve_preset(preset)
            stages = [replace(s, r_q=q, r_kv=kv) for s, (q, kv) in zip(stages, table)]
        if rate is not None:
            stages = [replace(s, r_q=rate, r_kv=rate) for s in stages]
        if sr_ratios is not None:
            stages = [replace(s, sr_ratio=int(r)) for s, r in zip(stages, sr_ratios)]
        return replace(self, stages=tuple(stages), variant=variant)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["stages"] = [asdict(s) for s in self.stages]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        try:
            stages = tuple(StageSpec(**s) for s in data["stages"])
            kwargs = {k: data[k] for k in ("variant", "num_classes", "decoder_dim", "proportional_attention") if k in data}
        except (KeyError, TypeError) as e:
            raise ConfigError(f"模型配置字段缺失或非法: {e}") from e
        return cls(stages=stages, **kwargs)

    @classmethod
    def from_tables(cls, channels, depths, heads, sr_ratios, variant: str = "sra",
                    rates: Optional[Sequence[Sequence[float]]] = None, **kwargs) -> "ModelConfig":
        rates = rates or [(0.0, 0.0)] * len(channels)
        stages = tuple(
            StageSpec(channels=int(c), depth=int(d), heads=int(h), sr_ratio=int(r), r_q=float(q), r_kv=float(kv))
            for c, d, h, r, (q, kv) in zip(channels, depths, heads, sr_ratios, rates)
        )
        return cls(stages=stages, variant=variant, **kwargs)

    @classmethod
    def toy(cls, variant: str = "sra", **kwargs) -> "ModelConfig":
        """MiT-tiny-toy: channels [32,64,160,256], depths [2,2,2,2], heads [1,2,5,8], sr [8,4,2,1]"""
        m = DEFAULTS["model"]
        return cls.from_tables(m["channels"], m["depths"], m["heads"], m["sr_ratios"], variant=variant, **kwargs)


def resolve_preset(name: str) -> Tuple[Tuple[float, float], ...]:
    key = (name or "").lower()
    if key not in PRESETS:
        raise ConfigError(f"未知预设: {name}，可选 {sorted(PRESETS)}")
    return PRESETS[key]


def load_model_config(path: str) -> ModelConfig:
    """读取模型配置（JSON 或 YAML 语法）"""
    if not os.path.exists(path):
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件格式错误: {path}")
    return ModelConfig.from_dict(data)


class BenchConfig:
    """bench.yaml 运行配置"""

    def __init__(self, config_path: Optional[str] = None):
        if config_path is None:
            config_path = os.getenv("SEGMERGE_CONFIG")
        if config_path is not None and not os.path.exists(config_path):
            raise ConfigError(f"配置文件不存在: {config_path}")
        if config_path is None:
            root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", "bench.yaml"))
            config_path = root if os.path.exists(root) else None

        loaded: Dict[str, Any] = {}
        if config_path:
            with open(config_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"配置文件格式错误: {config_path}")
        self.config_path = config_path
        self.config = _deep_merge(DEFAULTS, loaded)

        # 验证必要配置
        required_fields = ['model.channels', 'bench.warmup', 'bench.reps']
        for field_name in required_fields:
            if self._get_nested(field_name) is None:
                raise ConfigError(f"缺少必要配置: {field_name}")

    def _get_nested(self, path: str) -> Any:
        """获取嵌套配置值"""
        value = self.config
        for key in path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return None
        return value

    @property
    def output_dir(self) -> str:
        return self._get_nested('project.output_dir')

    @property
    def model_config(self) -> ModelConfig:
        m = self.config["model"]
        return ModelConfig.from_tables(
            m["channels"], m["depths"], m["heads"], m["sr_ratios"],
            num_classes=int(m.get("num_classes", 19)),
            decoder_dim=int(m.get("decoder_dim", 64)),
            proportional_attention=bool(m.get("proportional_attention", False)),
        )

    @property
    def bench(self) -> Dict[str, Any]:
        return self.config["bench"]

    @property
    def resolutions(self) -> List[Tuple[int, int]]:
        return [(int(h), int(w)) for h, w in self.bench.get("resolutions", [])]

    @property
    def chunk_elements(self) -> int:
        value = int(self._get_nested('attention.chunk_elements') or DEFAULTS["attention"]["chunk_elements"])
        if value < 1:
            raise ConfigError(f"attention.chunk_elements 必须为正: {value}")
        return value

    @property
    def logging(self) -> Dict[str, Any]:
        return self.config["logging"]
