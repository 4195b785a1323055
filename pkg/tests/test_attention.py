"""
五种注意力变体测试
"""

import math

import numpy as np
import pytest

from segmerge.core.exceptions import ConfigError, ShapeError
from segmerge.core.tensor import linear
from segmerge.modules.attention import (ATTENTION_BLOCKS, AttentionConfig, AttentionWeights, build_attention,
                                        neighbor2d_attention, segformerpp_attention, sra_attention,
                                        tome_sd_attention, vanilla_attention)


def make_weights(rng, dim, sr_ratio=1, scale=0.3):
    params = {}
    for name, shape in AttentionWeights.shapes(dim, sr_ratio).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith("beta"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return AttentionWeights.from_dict(params)


def block_constant_grid(rng, rows, cols, dim, s=2):
    """每个 s x s 块内为同一个单位范数 token，不同块的 token 互不相同"""
    blocks = rng.standard_normal((math.ceil(rows / s), math.ceil(cols / s), dim))
    blocks /= np.linalg.norm(blocks, axis=-1, keepdims=True)
    grid = np.repeat(np.repeat(blocks, s, axis=0), s, axis=1)[:rows, :cols]
    return grid.astype(np.float32)


def assert_rel_close(actual, expected, tol=1e-5):
    scale = max(float(np.abs(expected).max()), 1e-12)
    assert float(np.abs(actual - expected).max()) <= tol * scale


class TestAttentionConfig:

    def test_head_dim_must_divide(self):
        cfg = AttentionConfig(heads=3)
        with pytest.raises(ConfigError):
            cfg.check_dim(8)
        with pytest.raises(ConfigError):
            vanilla_attention(np.ones((2, 2, 8)), AttentionWeights.random(8), cfg)

    def test_tome_sd_requires_single_rate(self):
        with pytest.raises(ConfigError):
            AttentionConfig(variant="tome_sd", r_q=0.5, r_kv=0.25)

    def test_rejects_unknown_variant_and_bad_rate(self):
        with pytest.raises(ConfigError):
            AttentionConfig(variant="swin")
        with pytest.raises(ConfigError):
            AttentionConfig(r_kv=1.0)

    def test_registry(self):
        for name, cls in ATTENTION_BLOCKS.items():
            assert build_attention(AttentionConfig(variant=name)).variant == name
            assert isinstance(build_attention(AttentionConfig(variant=name)), cls)


class TestVanilla:

    def test_single_token_returns_value_projection(self, rng):
        dim = 6
        w = make_weights(rng, dim)
        x = rng.standard_normal((1, 1, dim)).astype(np.float32)
        out = vanilla_attention(x, w, AttentionConfig(heads=2))
        v = linear(x.reshape(1, dim), w.kv_w, w.kv_b)[:, dim:]
        expected = linear(v, w.proj_w, w.proj_b)
        np.testing.assert_allclose(out.reshape(1, dim), expected, rtol=1e-6, atol=1e-6)

    def test_permutation_equivariance(self, rng):
        dim = 8
        w = make_weights(rng, dim)
        x = rng.standard_normal((1, 12, dim)).astype(np.float32)
        perm = rng.permutation(12)
        cfg = AttentionConfig(heads=2, variant="vanilla")
        out = vanilla_attention(x, w, cfg)
        out_perm = vanilla_attention(x[:, perm], w, cfg)
        np.testing.assert_allclose(out_perm, out[:, perm], rtol=1e-5, atol=1e-6)

    def test_attention_macs(self, rng, macs):
        dim, rows, cols = 8, 4, 6
        vanilla_attention(rng.standard_normal((rows, cols, dim)), make_weights(rng, dim), AttentionConfig(heads=4))
        n = rows * cols
        assert macs.tag_macs("attention") == 2 * n * n * dim
        assert macs.tag_macs("projection") == n * dim * dim * 4

    def test_chunked_attention_matches(self, rng):
        dim = 8
        w = make_weights(rng, dim)
        x = rng.standard_normal((6, 6, dim)).astype(np.float32)
        whole = vanilla_attention(x, w, AttentionConfig(heads=2))
        chunked = vanilla_attention(x, w, AttentionConfig(heads=2, chunk_elements=5))
        np.testing.assert_allclose(chunked, whole, rtol=1e-5, atol=1e-6)


class TestDegeneracies:

    def test_all_degenerate_variants_bitwise_equal(self, rng):
        for _ in range(20):
            heads = int(rng.integers(1, 4))
            dim = heads * int(rng.integers(1, 5))
            rows, cols = rng.integers(1, 7, size=2)
            w = make_weights(rng, dim)
            x = rng.standard_normal((rows, cols, dim)).astype(np.float32)
            ref = vanilla_attention(x, w, AttentionConfig(heads=heads, sr_ratio=1))
            outs = [
                sra_attention(x, w, AttentionConfig(heads=heads, sr_ratio=1)),
                tome_sd_attention(x, w, AttentionConfig(heads=heads, r_q=0.0, r_kv=0.0)),
                segformerpp_attention(x, w, AttentionConfig(heads=heads, sr_ratio=1, r_q=0.0, r_kv=0.0)),
            ]
            for out in outs:
                assert out.tobytes() == ref.tobytes()

    def test_segformerpp_without_merging_equals_sra(self, rng):
        for r in (2, 4):
            dim = 8
            w = make_weights(rng, dim, sr_ratio=r)
            x = rng.standard_normal((8, 8, dim)).astype(np.float32)
            cfg = AttentionConfig(heads=2, sr_ratio=r)
            assert segformerpp_attention(x, w, cfg).tobytes() == sra_attention(x, w, cfg).tobytes()


class TestSpatialReduction:

    def test_kv_count_and_mac_ratio(self, rng, macs):
        dim = 8
        w = make_weights(rng, dim, sr_ratio=8)
        x = rng.standard_normal((64, 64, dim)).astype(np.float32)
        out, stats = build_attention(AttentionConfig(heads=2, sr_ratio=8)).forward_with_stats(x, w)
        assert out.shape == x.shape
        assert stats.n_kv == 64
        n = 64 * 64
        assert macs.tag_macs("attention") * 64 == 2 * n * n * dim

    def test_ratio_is_r_squared(self, rng, macs):
        dim = 4
        x = rng.standard_normal((8, 8, dim)).astype(np.float32)
        vanilla_attention(x, make_weights(rng, dim), AttentionConfig())
        base = macs.tag_macs("attention")
        for r in (1, 2, 4, 8):
            macs.reset()
            sra_attention(x, make_weights(rng, dim, sr_ratio=r), AttentionConfig(sr_ratio=r))
            assert base == macs.tag_macs("attention") * r * r

    def test_indivisible_grid(self, rng):
        with pytest.raises(ShapeError):
            sra_attention(np.ones((6, 6, 4)), make_weights(rng, 4, sr_ratio=4), AttentionConfig(sr_ratio=4))


class TestToMeSD:

    def test_half_rate_quarters_attention_macs(self, rng, macs):
        dim = 4
        x = rng.standard_normal((8, 8, dim)).astype(np.float32)
        w = make_weights(rng, dim)
        vanilla_attention(x, w, AttentionConfig())
        base = macs.tag_macs("attention")
        macs.reset()
        out = tome_sd_attention(x, w, AttentionConfig(r_q=0.5, r_kv=0.5))
        assert out.shape == x.shape
        assert base == 4 * macs.tag_macs("attention")
        assert macs.tag_macs("similarity") <= 64 * 64 * dim / 4

    @pytest.mark.parametrize("proportional", [False, True])
    def test_duplicate_blocks_are_lossless(self, rng, proportional):
        for _ in range(20):
            rows, cols = 2 * rng.integers(1, 5, size=2)
            dim = 8
            x = block_constant_grid(rng, rows, cols, dim)
            w = make_weights(rng, dim)
            ref = vanilla_attention(x, w, AttentionConfig(heads=2))
            out = tome_sd_attention(x, w, AttentionConfig(heads=2, r_q=0.75, r_kv=0.75,
                                                          proportional_attention=proportional))
            assert_rel_close(out, ref)

    def test_uneven_groups_need_proportional_attention(self, rng):
        # 每个源 token 复制某个目标 token：r=0.75 时源全部并入，组大小即各目标被复制的次数
        uneven = 0
        for _ in range(20):
            rows, cols = 2 * rng.integers(1, 4, size=2)
            dim = 8
            k = (rows // 2) * (cols // 2)
            palette = rng.standard_normal((k, dim))
            palette /= np.linalg.norm(palette, axis=-1, keepdims=True)
            skew = np.arange(k, 0, -1)
            pick = rng.choice(k, size=(rows, cols), p=skew / skew.sum())
            pick[::2, ::2] = np.arange(k).reshape(rows // 2, cols // 2)
            x = palette[pick].astype(np.float32)
            w = make_weights(rng, dim)
            ref = vanilla_attention(x, w, AttentionConfig(heads=2))

            cfg = AttentionConfig(variant="tome_sd", heads=2, r_q=0.75, r_kv=0.75, proportional_attention=True)
            prop, stats = build_attention(cfg).forward_with_stats(x, w)
            assert stats.n_kv == k
            np.testing.assert_array_equal(stats.kv_map.size_of, np.bincount(pick.ravel(), minlength=stats.n_kv))
            assert_rel_close(prop, ref)

            if stats.kv_map.size_of.min() == stats.kv_map.size_of.max():
                continue
            uneven += 1
            plain = tome_sd_attention(x, w, AttentionConfig(heads=2, r_q=0.75, r_kv=0.75))
            assert float(np.abs(plain - ref).max()) > 1e-3 * float(np.abs(ref).max())
        assert uneven >= 5

    def test_proportional_flag_is_noop_without_merging(self, rng):
        dim = 4
        w = make_weights(rng, dim)
        x = rng.standard_normal((4, 4, dim)).astype(np.float32)
        plain = tome_sd_attention(x, w, AttentionConfig())
        prop = tome_sd_attention(x, w, AttentionConfig(proportional_attention=True))
        assert prop.tobytes() == plain.tobytes()


class TestNeighbor2D:

    def test_constant_field_matches_sra(self, rng):
        dim = 8
        w = make_weights(rng, dim, sr_ratio=2)
        x = np.broadcast_to(rng.standard_normal(dim).astype(np.float32), (8, 8, dim)).copy()
        cfg = AttentionConfig(heads=2, sr_ratio=2)
        out = neighbor2d_attention(x, w, cfg)
        ref = sra_attention(x, w, cfg)
        np.testing.assert_allclose(out, ref, atol=1e-6)
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=1e-6)

    def test_quarter_queries_and_block_constant_output(self, rng):
        dim = 4
        w = make_weights(rng, dim, sr_ratio=2)
        x = rng.standard_normal((8, 12, dim)).astype(np.float32)
        out, stats = build_attention(AttentionConfig(variant="neighbor2d", sr_ratio=2)).forward_with_stats(x, w)
        assert stats.n_queries == 8 * 12 // 4
        assert out.shape == x.shape
        blocks = out.reshape(4, 2, 6, 2, dim)
        assert (blocks == blocks[:, :1, :, :1]).all()

    def test_odd_grid_rejected(self, rng):
        with pytest.raises(ShapeError):
            neighbor2d_attention(np.ones((3, 4, 4)), make_weights(rng, 4), AttentionConfig())


class TestSegformerPP:

    def test_hq_stage_one_kv_count(self, rng):
        dim = 8
        w = make_weights(rng, dim, sr_ratio=8)
        x = rng.standard_normal((64, 64, dim)).astype(np.float32)
        cfg = AttentionConfig(variant="segformerpp", heads=1, sr_ratio=8, r_q=0.0, r_kv=0.6)
        out, stats = build_attention(cfg).forward_with_stats(x, w)
        assert out.shape == x.shape
        assert stats.kv_map.n_original == 64
        assert stats.n_kv == 64 - math.floor(0.6 * 64) == 26
        assert stats.n_queries == 4096

    def test_mac_ratio_uses_actual_counts(self, rng, macs):
        dim = 8
        w = make_weights(rng, dim, sr_ratio=2)
        x = rng.standard_normal((16, 16, dim)).astype(np.float32)
        cfg = AttentionConfig(variant="segformerpp", heads=2, sr_ratio=2, r_q=0.5, r_kv=0.5)
        _, stats = build_attention(cfg).forward_with_stats(x, w)
        assert macs.tag_macs("attention") == 2 * stats.n_queries * stats.n_kv * dim
        assert stats.n_queries == 128 and stats.n_kv == 32
        # vanilla / segformerpp == λ_q·λ_kv·R²
        assert 2 * 256 * 256 * dim == macs.tag_macs("attention") * 2 * 2 * 4

    def test_duplicate_queries_are_lossless(self, rng):
        for _ in range(100):
            r = int(rng.choice([1, 2]))
            rows, cols = 2 * r * rng.integers(1, 4, size=2)
            heads = int(rng.integers(1, 3))
            dim = 4 * heads
            x = block_constant_grid(rng, rows, cols, dim)
            w = make_weights(rng, dim, sr_ratio=r)
            ref = sra_attention(x, w, AttentionConfig(heads=heads, sr_ratio=r))
            out = segformerpp_attention(x, w, AttentionConfig(heads=heads, sr_ratio=r, r_q=0.75, r_kv=0.0))
            assert_rel_close(out, ref)

    def test_shape_preserved_for_random_configs(self, rng):
        for _ in range(30):
            variant = str(rng.choice(list(ATTENTION_BLOCKS)))
            r = int(rng.choice([1, 2]))
            rows, cols = 2 * r * rng.integers(1, 4, size=2)
            rate = float(rng.choice([0.0, 0.5, 0.75]))
            r_kv = rate if variant == "tome_sd" else float(rng.choice([0.0, 0.5]))
            cfg = AttentionConfig(variant=variant, heads=2, sr_ratio=r, r_q=rate, r_kv=r_kv)
            x = rng.standard_normal((rows, cols, 4)).astype(np.float32)
            assert build_attention(cfg)(x, make_weights(rng, 4, sr_ratio=r)).shape == x.shape
