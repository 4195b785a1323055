"""
功能模块
token 合并、注意力变体、MiT 编码器、代价模型、模型读写与基准测试
"""

from .attention import (ATTENTION_BLOCKS, AttentionBlock, AttentionConfig, AttentionWeights, build_attention,
                        neighbor2d_attention, segformerpp_attention, sra_attention, tome_sd_attention,
                        vanilla_attention)
from .encoder import MixTransformer, decode_head, encoder_forward, init_weights
from .token_merge import MergeMap, MergePolicy, bipartite_soft_matching, merge, merge_by_quantity, unmerge

__all__ = [
    'ATTENTION_BLOCKS',
    'AttentionBlock',
    'AttentionConfig',
    'AttentionWeights',
    'build_attention',
    'vanilla_attention',
    'sra_attention',
    'tome_sd_attention',
    'neighbor2d_attention',
    'segformerpp_attention',
    'MixTransformer',
    'encoder_forward',
    'decode_head',
    'init_weights',
    'MergeMap',
    'MergePolicy',
    'bipartite_soft_matching',
    'merge',
    'unmerge',
    'merge_by_quantity',
]
