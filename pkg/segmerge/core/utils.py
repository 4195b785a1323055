"""
通用工具模块
"""

import json
import os
from typing import Any, Dict, Tuple

from .exceptions import FormatError
from .log import log


class SegMergeUtils:
    """文件读写与路径工具"""

    @staticmethod
    def save_json_file(file_path: str, data: Any, ensure_ascii: bool = False) -> None:
        """保存JSON文件"""
        SegMergeUtils.ensure_parent(file_path)
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=ensure_ascii, indent=2)

    @staticmethod
    def load_json_file(file_path: str) -> Any:
        """加载JSON文件，损坏或缺失时抛出 FormatError"""
        if not os.path.exists(file_path):
            raise FormatError(f"文件不存在: {file_path}")
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"无法解析 {file_path}: {e}") from e

    @staticmethod
    def save_text_file(file_path: str, content: str) -> None:
        """保存文本文件"""
        SegMergeUtils.ensure_parent(file_path)
        with open(file_path, 'w', encoding='utf-8', newline='') as f:
            f.write(content)

    @staticmethod
    def save_bytes_file(file_path: str, payload: bytes) -> None:
        SegMergeUtils.ensure_parent(file_path)
        with open(file_path, 'wb') as f:
            f.write(payload)

    @staticmethod
    def load_bytes_file(file_path: str) -> bytes:
        if not os.path.exists(file_path):
            raise FormatError(f"文件不存在: {file_path}")
        with open(file_path, 'rb') as f:
            return f.read()

    @staticmethod
    def ensure_parent(file_path: str) -> None:
        parent = os.path.dirname(file_path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    @staticmethod
    def weight_file_paths(output_dir: str, name: str) -> Tuple[str, str]:
        """返回 (<name>.manifest.json, <name>.weights.bin)"""
        return (
            os.path.join(output_dir, f"{name}.manifest.json"),
            os.path.join(output_dir, f"{name}.weights.bin"),
        )

    @staticmethod
    def config_file_path(output_dir: str, name: str) -> str:
        return os.path.join(output_dir, f"{name}.config.json")

    @staticmethod
    def describe_files(paths: Dict[str, str]) -> None:
        for label, path in paths.items():
            size = os.path.getsize(path) if os.path.exists(path) else 0
            log.info(f"   {label}: {path} ({size:,} bytes)")
