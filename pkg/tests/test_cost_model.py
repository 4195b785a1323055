"""
解析注意力代价模型及其与实测 MAC 一致性测试
"""

import math

import numpy as np
import pytest

from segmerge.core.config import ModelConfig
from segmerge.core.exceptions import ParameterError, ShapeError
from segmerge.core.rng import random_tensor
from segmerge.modules.cost_model import (cost_segformerpp, cost_sra, cost_tome_sd, cost_vanilla, format_cost_report,
                                         model_cost, segformerpp_coefficient, segformerpp_factor, sra_factor,
                                         tome_sd_factor)
from segmerge.modules.encoder import MixTransformer, init_weights


class TestFormulas:

    def test_vanilla(self):
        assert cost_vanilla(2, 1) == 8
        assert cost_vanilla(4096, 64) == 2_147_483_648
        assert cost_vanilla(20, 3) == 4 * cost_vanilla(10, 3)

    def test_vanilla_rejects_empty(self):
        with pytest.raises(ParameterError):
            cost_vanilla(0, 4)

    def test_sra(self):
        assert cost_sra(4096, 64, 8) == 33_554_432
        assert cost_sra(100, 3, 1) == cost_vanilla(100, 3)
        for r in (1, 2, 4, 8):
            assert sra_factor(r) == r * r
            assert cost_vanilla(256, 16) / cost_sra(256, 16, r) == r * r

    def test_tome_sd(self):
        assert tome_sd_factor(0.5) == 2.0
        assert tome_sd_factor(0.0) == pytest.approx(0.8)
        assert cost_tome_sd(1000, 8, 0.0) > cost_vanilla(1000, 8)
        assert tome_sd_factor(0.999999) == pytest.approx(4.0, rel=1e-4)

    def test_segformerpp(self):
        assert segformerpp_coefficient(2, 0.0, 0.6) == pytest.approx(0.365625, abs=1e-12)
        assert abs(segformerpp_factor(2, 0.0, 0.6) - 1 / 0.365625) < 1e-9
        assert round(segformerpp_factor(2, 0.0, 0.6), 4) == 2.7350
        assert segformerpp_factor(1, 0.0, 0.0) == pytest.approx(2 / 3)

    def test_segformerpp_monotone_in_rates(self):
        rates = [0.0, 0.2, 0.5, 0.6, 0.8, 0.9]
        for r in (1, 2, 4, 8):
            for fixed in rates:
                by_q = [segformerpp_factor(r, q, fixed) for q in rates]
                by_kv = [segformerpp_factor(r, fixed, kv) for kv in rates]
                assert by_q == sorted(by_q)
                assert by_kv == sorted(by_kv)

    def test_rate_out_of_range(self):
        with pytest.raises(ParameterError):
            segformerpp_factor(2, 1.0, 0.0)
        with pytest.raises(ParameterError):
            sra_factor(0)

    def test_factors_are_scale_free(self, rng):
        for _ in range(20):
            n1, n2 = (int(v) for v in rng.integers(1, 10_000, size=2))
            d1, d2 = (int(v) for v in rng.integers(1, 512, size=2))
            f1 = cost_vanilla(n1, d1) / cost_segformerpp(n1, d1, 4, 0.5, 0.6)
            f2 = cost_vanilla(n2, d2) / cost_segformerpp(n2, d2, 4, 0.5, 0.6)
            assert f1 == pytest.approx(f2, rel=1e-12)
            assert f1 == pytest.approx(segformerpp_factor(4, 0.5, 0.6), rel=1e-12)


class TestModelCost:

    def test_vanilla_factor_is_one(self, tiny_config):
        report = model_cost(tiny_config.with_variant("vanilla"), 256, 256)
        assert report.reduction_factor == 1.0
        assert report.per_stage_breakdown == [cost_vanilla(s.n_tokens, s.dim) for s in report.stages]

    def test_sra_stage_factors(self, tiny_config):
        report = model_cost(tiny_config, 512, 512)
        assert [s.factor for s in report.stages] == [64, 16, 4, 1]
        assert report.reduction_factor >= 1.0

    def test_fast_beats_hq(self):
        base = ModelConfig.toy()
        hq = model_cost(base.with_variant("segformerpp", preset="hq"), 1024, 1024)
        fast = model_cost(base.with_variant("segformerpp", preset="fast"), 1024, 1024)
        assert fast.reduction_factor > hq.reduction_factor > 1.0

    def test_minimal_token_counts(self, tiny_config):
        report = model_cost(tiny_config, 64, 64)
        assert [s.n_tokens for s in report.stages] == [256, 64, 16, 4]
        assert report.n_tokens == 256

    def test_rejects_bad_input(self, tiny_config):
        with pytest.raises(ShapeError):
            model_cost(tiny_config, 96, 64)

    def test_text_report_has_stage_table(self, tiny_config):
        text = format_cost_report(model_cost(tiny_config.with_variant("segformerpp", preset="hq"), 128, 128))
        assert "| stage |" in text
        assert text.count("\n| ") >= 5
        assert "note:" in text


class _Recorder:
    """包装注意力块，记录每次调用的 attention MAC 数"""

    def __init__(self, block, counter):
        self.block = block
        self.counter = counter
        self.calls = []

    def __call__(self, x, weights):
        before = self.counter.tag_macs("attention")
        out = self.block(x, weights)
        self.calls.append(self.counter.tag_macs("attention") - before)
        return out


def _stage_attention_macs(config, weights, image, counter):
    model = MixTransformer(config, weights)
    recorders = [_Recorder(block, counter) for block in model.attention]
    model.attention = recorders
    model.encode(image)
    return [sum(r.calls) for r in recorders]


class TestMeasuredMacs:

    @pytest.mark.parametrize("variant,preset,rate", [
        ("vanilla", None, None), ("sra", None, None), ("tome_sd", None, 0.5),
        ("neighbor2d", None, None), ("segformerpp", "hq", None), ("segformerpp", "fast", None),
    ])
    def test_exact_counts_match_counter(self, tiny_config, macs, variant, preset, rate):
        config = tiny_config.with_variant(variant, preset=preset, rate=rate)
        report = model_cost(config, 128, 128)
        MixTransformer(config, init_weights(config, seed=0))(random_tensor((128, 128, 3), seed=1))
        tags = macs.snapshot()["by_tag"]
        assert report.attention_macs == tags["attention"]
        assert report.similarity_macs == tags.get("similarity", 0)
        assert report.linear_macs == tags["projection"] + tags["conv"]

    def test_vanilla_over_sra_is_r_squared_per_stage(self, tiny_config, macs):
        weights = init_weights(tiny_config, seed=0)
        image = random_tensor((512, 512, 3), seed=1)
        vanilla = _stage_attention_macs(tiny_config.with_variant("vanilla"), weights, image, macs)
        sra = _stage_attention_macs(tiny_config, weights, image, macs)
        for v, s, stage in zip(vanilla, sra, tiny_config.stages):
            assert v == s * stage.sr_ratio ** 2

    def test_vanilla_over_segformerpp_tracks_formula(self, tiny_config, macs):
        weights = init_weights(tiny_config, seed=0)
        image = random_tensor((512, 512, 3), seed=1)
        config = tiny_config.with_variant("segformerpp", preset="hq")
        vanilla = _stage_attention_macs(tiny_config.with_variant("vanilla"), weights, image, macs)
        merged = _stage_attention_macs(config, weights, image, macs)
        report = model_cost(config, 512, 512)
        for v, m, stage, cost in zip(vanilla, merged, config.stages, report.stages):
            lam_q, lam_kv = 1 / (1 - stage.r_q), 1 / (1 - stage.r_kv)
            predicted = lam_q * lam_kv * stage.sr_ratio ** 2
            assert math.isclose(v / m, predicted, rel_tol=0.10)
            assert math.isclose(v / m, cost.attention_factor, rel_tol=0.10)

    def test_cross_check_at_256(self, tiny_config, macs):
        config = tiny_config.with_variant("segformerpp", preset="fast")
        weights = init_weights(config, seed=0)
        image = random_tensor((256, 256, 3), seed=1)
        vanilla = _stage_attention_macs(tiny_config.with_variant("vanilla"), weights, image, macs)
        merged = _stage_attention_macs(config, weights, image, macs)
        report = model_cost(config, 256, 256)
        assert math.isclose(sum(vanilla) / sum(merged), report.attention_factor, rel_tol=0.10)
        assert np.all(np.array(merged) > 0)
