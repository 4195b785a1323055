"""
模型读写模块
- 清单 <name>.manifest.json：格式版本、按顺序排列的 (名称, 形状, 字节偏移)、blob 总长度
- 权重 <name>.weights.bin：小端 float32 原始字节
- 配置 <name>.config.json：ModelConfig 字段
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from ..core.config import ModelConfig, load_model_config
from ..core.exceptions import FormatError, LoadError
from ..core.log import log
from ..core.rng import random_tensor
from ..core.utils import SegMergeUtils
from .encoder import MixTransformer, Weights, check_weights, parameter_shapes

FORMAT_VERSION = 1
DTYPE = np.dtype("<f4")

__all__ = [
    "FORMAT_VERSION", "ManifestEntry", "WeightManifest", "save_weights", "load_weights",
    "save_model_config", "load_model_config", "random_tensor",
]


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPE.itemsize


@dataclass(frozen=True)
class WeightManifest:
    """有序张量清单；构造时校验偏移与长度不变量"""
    entries: Tuple[ManifestEntry, ...]
    total_length: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        self.validate()

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise FormatError(f"清单版本 {self.format_version} 不受支持，期望 {FORMAT_VERSION}")
        seen = set()
        expected_offset = 0
        for entry in self.entries:
            if entry.name in seen:
                raise FormatError(f"清单中张量名重复: {entry.name}")
            seen.add(entry.name)
            if any(d < 1 for d in entry.shape):
                raise FormatError(f"张量 {entry.name} 形状非法: {entry.shape}")
            if entry.offset != expected_offset:
                kind = "重叠" if entry.offset < expected_offset else "不连续"
                raise FormatError(f"张量 {entry.name} 偏移 {entry.offset} {kind}，期望 {expected_offset}")
            expected_offset += entry.nbytes
        if expected_offset != self.total_length:
            raise FormatError(f"张量字节总和 {expected_offset} 与 total_length {self.total_length} 不一致")

    @classmethod
    def from_weights(cls, weights: Weights) -> "WeightManifest":
        entries: List[ManifestEntry] = []
        offset = 0
        for name, tensor in weights.items():
            entry = ManifestEntry(name, tuple(int(d) for d in np.shape(tensor)), offset)
            entries.append(entry)
            offset += entry.nbytes
        return cls(tuple(entries), offset)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "dtype": "float32",
            "byte_order": "little",
            "total_length": self.total_length,
            "tensors": [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WeightManifest":
        try:
            version = int(data["format_version"])
            if version != FORMAT_VERSION:
                raise FormatError(f"清单版本 {version} 不受支持，期望 {FORMAT_VERSION}")
            if data.get("dtype", "float32") != "float32" or data.get("byte_order", "little") != "little":
                raise FormatError(f"不支持的数据类型: {data.get('dtype')}/{data.get('byte_order')}")
            entries = tuple(
                ManifestEntry(str(t["name"]), tuple(int(d) for d in t["shape"]), int(t["offset"]))
                for t in data["tensors"]
            )
            return cls(entries, int(data["total_length"]), version)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"清单字段缺失或非法: {e}") from e


def save_model_config(config: ModelConfig, path: str) -> str:
    SegMergeUtils.save_json_file(path, config.to_dict())
    return path


def save_weights(model: Union[MixTransformer, Weights], output_dir: str, name: str = "model") -> Tuple[str, str]:
    """写出 (manifest 路径, blob 路径)"""
    weights = model.weights if isinstance(model, MixTransformer) else model
    manifest = WeightManifest.from_weights(weights)
    blob = b"".join(np.ascontiguousarray(weights[e.name], dtype=DTYPE).tobytes() for e in manifest.entries)
    manifest_path, blob_path = SegMergeUtils.weight_file_paths(output_dir, name)
    SegMergeUtils.save_json_file(manifest_path, manifest.to_dict())
    SegMergeUtils.save_bytes_file(blob_path, blob)
    log.info(f"✅ 权重已保存: {len(manifest.entries)} 个张量, {manifest.total_length:,} 字节")
    return manifest_path, blob_path


def read_manifest(manifest_path: str) -> WeightManifest:
    data = SegMergeUtils.load_json_file(manifest_path)
    if not isinstance(data, dict):
        raise FormatError(f"清单格式错误: {manifest_path}")
    return WeightManifest.from_dict(data)


def load_weights(manifest_path: str, blob_path: str, config: ModelConfig) -> MixTransformer:
    """读取清单与 blob 并按 config 校验形状，返回只读模型"""
    manifest = read_manifest(manifest_path)
    blob = SegMergeUtils.load_bytes_file(blob_path)
    if len(blob) != manifest.total_length:
        for entry in manifest.entries:
            if entry.offset + entry.nbytes > len(blob):
                raise FormatError(
                    f"权重文件被截断: 张量 {entry.name} 需要字节 [{entry.offset}, {entry.offset + entry.nbytes})，"
                    f"文件只有 {len(blob)} 字节")
        raise FormatError(f"权重文件长度 {len(blob)} 超出清单 total_length {manifest.total_length}")

    weights: Weights = OrderedDict()
    for entry in manifest.entries:
        count = entry.nbytes // DTYPE.itemsize
        tensor = np.frombuffer(blob, dtype=DTYPE, count=count, offset=entry.offset)
        tensor = tensor.astype(np.float32).reshape(entry.shape)
        tensor.flags.writeable = False
        weights[entry.name] = tensor

    check_weights(config, weights)
    expected = parameter_shapes(config)
    extra = [name for name in weights if name not in expected]
    if extra:
        raise LoadError(f"清单包含配置之外的张量: {extra[0]}")
    log.info(f"✅ 权重已加载: {len(weights)} 个张量 ({manifest.total_length:,} 字节)")
    return MixTransformer(config, weights)

