"""
bench.yaml 加载与模型配置工具测试
"""

import pytest

from segmerge.core.config import (PRESETS, BenchConfig, ModelConfig, StageSpec, load_model_config,
                                  partition_for_rate, resolve_preset)
from segmerge.core.exceptions import ConfigError, ParameterError, ShapeError


class TestBenchConfig:

    def test_defaults_fill_missing_sections(self, tmp_path):
        path = tmp_path / "bench.yaml"
        path.write_text("bench:\n  reps: 5\n", encoding="utf-8")
        settings = BenchConfig(str(path))
        assert settings.bench["reps"] == 5
        assert settings.bench["warmup"] == 3
        assert settings.model_config == ModelConfig.toy()
        assert settings.chunk_elements == 1 << 24

    def test_env_variable(self, tmp_path, monkeypatch):
        path = tmp_path / "env.yaml"
        path.write_text("project:\n  output_dir: elsewhere\n", encoding="utf-8")
        monkeypatch.setenv("SEGMERGE_CONFIG", str(path))
        assert BenchConfig().output_dir == "elsewhere"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            BenchConfig(str(tmp_path / "absent.yaml"))

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            BenchConfig(str(path))

    def test_resolutions_and_chunks(self, tmp_path):
        path = tmp_path / "bench.yaml"
        path.write_text("bench:\n  resolutions: [[64, 128]]\nattention:\n  chunk_elements: -1\n", encoding="utf-8")
        settings = BenchConfig(str(path))
        assert settings.resolutions == [(64, 128)]
        with pytest.raises(ConfigError):
            _ = settings.chunk_elements


class TestModelConfig:

    def test_toy_tables(self):
        config = ModelConfig.toy()
        assert config.channels == [32, 64, 160, 256]
        assert [s.sr_ratio for s in config.stages] == [8, 4, 2, 1]
        assert config.variant == "sra"

    def test_presets(self):
        assert resolve_preset("HQ") == PRESETS["hq"]
        config = ModelConfig.toy().with_variant("segformerpp", preset="fast")
        assert [(s.r_q, s.r_kv) for s in config.stages] == [(0.0, 0.9), (0.0, 0.9), (0.9, 0.0), (0.9, 0.0)]
        with pytest.raises(ConfigError):
            resolve_preset("medium")

    def test_single_rate(self):
        config = ModelConfig.toy().with_variant("tome_sd", rate=0.5)
        assert all(s.r_q == s.r_kv == 0.5 for s in config.stages)

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig.toy(variant="swin")
        with pytest.raises(ConfigError):
            ModelConfig.from_tables([30, 64, 160, 256], [1] * 4, [4, 2, 5, 8], [8, 4, 2, 1])
        with pytest.raises(ConfigError):
            ModelConfig(stages=(StageSpec(8, 1, 1, 1),))
        with pytest.raises(ConfigError):
            ModelConfig.toy().with_variant("tome_sd", preset="hq")

    def test_input_multiple(self):
        ModelConfig.check_input(64, 1024)
        for h, w in [(0, 64), (32, 64), (96, 64)]:
            with pytest.raises(ShapeError):
                ModelConfig.check_input(h, w)
        assert ModelConfig.stage_grid(512, 1024, 3) == (16, 32)

    def test_file_round_trip(self, tmp_path):
        config = ModelConfig.toy().with_variant("segformerpp", preset="hq")
        path = tmp_path / "model.yaml"
        path.write_text(
            "stages:\n" + "".join(
                f"  - {{channels: {s.channels}, depth: {s.depth}, heads: {s.heads}, sr_ratio: {s.sr_ratio}, "
                f"r_q: {s.r_q}, r_kv: {s.r_kv}}}\n" for s in config.stages)
            + "variant: segformerpp\nnum_classes: 19\ndecoder_dim: 64\n",
            encoding="utf-8",
        )
        assert load_model_config(str(path)) == config
        assert ModelConfig.from_dict(config.to_dict()) == config

    def test_missing_fields(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"variant": "sra"})


class TestPartition:

    @pytest.mark.parametrize("rate,side", [(0.0, 2), (0.5, 2), (0.6, 2), (0.75, 2), (0.8, 3), (0.9, 4)])
    def test_side_length(self, rate, side):
        assert partition_for_rate(rate) == side

    def test_rate_range(self):
        with pytest.raises(ParameterError):
            partition_for_rate(1.0)
