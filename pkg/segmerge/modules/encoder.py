"""
玩具 MixTransformer 编码器
重叠 patch embedding + 四个金字塔阶段（注意力变体 + MixFFN）+ 轻量解码头。

权重以有序的 {名称: ndarray} 字典保存，名称布局见 parameter_shapes()。
卷积权重为 (k, k, C_in, C_out)，线性层为 (D_in, D_out)。
"""

from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core.config import ModelConfig
from ..core.exceptions import LoadError, ShapeError
from ..core.log import log
from ..core.rng import init_parameter
from ..core.tensor import (bilinear_resize, conv2d, depthwise_conv2d, ensure_tensor, gelu, layernorm, linear,
                           shape_str)
from .attention import AttentionBlock, AttentionConfig, AttentionWeights, build_attention
from .token_merge import DEFAULT_CHUNK_ELEMENTS

IN_CHANNELS = 3
MLP_RATIO = 4
NORM_EPS = 1e-6

Weights = Dict[str, np.ndarray]


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """按前向顺序列出全部参数名与形状；与注意力变体无关"""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    prev = IN_CHANNELS
    for i, stage in enumerate(config.stages, start=1):
        d = stage.channels
        kernel = 7 if i == 1 else 3
        shapes[f"patch_embed{i}.proj.weight"] = (kernel, kernel, prev, d)
        shapes[f"patch_embed{i}.proj.bias"] = (d,)
        shapes[f"patch_embed{i}.norm.gamma"] = (d,)
        shapes[f"patch_embed{i}.norm.beta"] = (d,)
        for j in range(stage.depth):
            p = f"block{i}.{j}."
            shapes[p + "norm1.gamma"] = (d,)
            shapes[p + "norm1.beta"] = (d,)
            for name, shape in AttentionWeights.shapes(d, stage.sr_ratio).items():
                shapes[p + "attn." + name] = shape
            shapes[p + "norm2.gamma"] = (d,)
            shapes[p + "norm2.beta"] = (d,)
            hidden = MLP_RATIO * d
            shapes[p + "mlp.fc1.weight"] = (d, hidden)
            shapes[p + "mlp.fc1.bias"] = (hidden,)
            shapes[p + "mlp.dwconv.weight"] = (3, 3, hidden)
            shapes[p + "mlp.dwconv.bias"] = (hidden,)
            shapes[p + "mlp.fc2.weight"] = (hidden, d)
            shapes[p + "mlp.fc2.bias"] = (d,)
        shapes[f"norm{i}.gamma"] = (d,)
        shapes[f"norm{i}.beta"] = (d,)
        prev = d

    e = config.decoder_dim
    for i, stage in enumerate(config.stages, start=1):
        shapes[f"head.linear_c{i}.weight"] = (stage.channels, e)
        shapes[f"head.linear_c{i}.bias"] = (e,)
    shapes["head.fuse.weight"] = (1, 1, len(config.stages) * e, e)
    shapes["head.fuse.bias"] = (e,)
    shapes["head.cls.weight"] = (e, config.num_classes)
    shapes["head.cls.bias"] = (config.num_classes,)
    return shapes


def init_weights(config: ModelConfig, seed: int = 0) -> Weights:
    """按参数名派生子 seed 生成随机权重，同一 seed 逐位可复现"""
    weights: Weights = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        weights[name] = init_parameter(name, shape, seed)
    log.debug(f"初始化权重 {len(weights)} 个张量, seed={seed}")
    return weights


def check_weights(config: ModelConfig, weights: Weights) -> None:
    """权重缺失或形状与配置不一致时抛出 LoadError"""
    for name, shape in parameter_shapes(config).items():
        if name not in weights:
            raise LoadError(f"缺少权重: {name}")
        actual = tuple(np.shape(weights[name]))
        if actual != shape:
            raise LoadError(f"权重 {name} 形状 {shape_str(actual)} 与配置要求的 {shape_str(shape)} 不一致")


def patch_embed(image: np.ndarray, weights: Weights, prefix: str = "patch_embed1.") -> np.ndarray:
    """7x7 / stride 4 / padding 3 重叠卷积 + LayerNorm，输出 (H/4, W/4, D_1)"""
    image = ensure_tensor(image, ndim=3, name="image")
    ModelConfig.check_input(image.shape[0], image.shape[1])
    x = conv2d(image, weights[prefix + "proj.weight"], weights[prefix + "proj.bias"], stride=4, padding=3)
    return layernorm(x, weights[prefix + "norm.gamma"], weights[prefix + "norm.beta"], eps=NORM_EPS)


def downsample_stage(grid: np.ndarray, weights: Weights, prefix: str) -> np.ndarray:
    """3x3 / stride 2 / padding 1 卷积 + LayerNorm，空间尺寸减半"""
    grid = ensure_tensor(grid, ndim=3, name="grid")
    if grid.shape[0] % 2 or grid.shape[1] % 2:
        raise ShapeError(f"downsample_stage 需要偶数网格: {grid.shape}")
    x = conv2d(grid, weights[prefix + "proj.weight"], weights[prefix + "proj.bias"], stride=2, padding=1)
    return layernorm(x, weights[prefix + "norm.gamma"], weights[prefix + "norm.beta"], eps=NORM_EPS)


def mix_ffn(tokens: np.ndarray, weights: Weights, prefix: str = "") -> np.ndarray:
    """fc1 (4x) -> 3x3 逐通道卷积 -> GELU -> fc2；残差由调用方添加"""
    tokens = ensure_tensor(tokens, ndim=3, name="tokens")
    h = linear(tokens, weights[prefix + "fc1.weight"], weights[prefix + "fc1.bias"])
    h = depthwise_conv2d(h, weights[prefix + "dwconv.weight"], weights[prefix + "dwconv.bias"], padding=1)
    return linear(gelu(h), weights[prefix + "fc2.weight"], weights[prefix + "fc2.bias"])


def transformer_block(x: np.ndarray, weights: Weights, prefix: str, attention: AttentionBlock) -> np.ndarray:
    h = layernorm(x, weights[prefix + "norm1.gamma"], weights[prefix + "norm1.beta"], eps=NORM_EPS)
    x = x + attention(h, AttentionWeights.from_dict(weights, prefix + "attn."))
    h = layernorm(x, weights[prefix + "norm2.gamma"], weights[prefix + "norm2.beta"], eps=NORM_EPS)
    return x + mix_ffn(h, weights, prefix + "mlp.")


def decode_head(pyramid: List[np.ndarray], weights: Weights, num_classes: int) -> np.ndarray:
    """各阶段投影到统一维度、缩放到 1/4 分辨率、拼接、1x1 融合、ReLU、分类投影"""
    if not pyramid:
        raise ShapeError("decode_head 需要非空金字塔")
    cls_w = weights["head.cls.weight"]
    if cls_w.shape[1] != num_classes:
        raise LoadError(f"head.cls.weight 输出 {cls_w.shape[1]} 类，期望 {num_classes}")
    out_h, out_w = pyramid[0].shape[:2]
    projected = []
    for i, feature in enumerate(pyramid, start=1):
        p = linear(feature, weights[f"head.linear_c{i}.weight"], weights[f"head.linear_c{i}.bias"])
        if p.shape[:2] != (out_h, out_w):
            p = bilinear_resize(p, out_h, out_w)
        projected.append(p)
    fused = conv2d(np.concatenate(projected, axis=-1), weights["head.fuse.weight"], weights["head.fuse.bias"])
    fused = np.maximum(fused, 0.0)
    return linear(fused, cls_w, weights["head.cls.bias"])


class MixTransformer:
    """四阶段编码器 + 解码头；构造后权重只读"""

    def __init__(self, config: ModelConfig, weights: Weights,
                 chunk_elements: int = DEFAULT_CHUNK_ELEMENTS):
        check_weights(config, weights)
        self.config = config
        self.weights = weights
        self.attention: List[AttentionBlock] = [
            build_attention(AttentionConfig(
                heads=stage.heads, sr_ratio=stage.sr_ratio, r_q=stage.r_q, r_kv=stage.r_kv,
                variant=config.variant, proportional_attention=config.proportional_attention,
                chunk_elements=chunk_elements,
            ))
            for stage in config.stages
        ]

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0,
               chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> "MixTransformer":
        return cls(config, init_weights(config, seed), chunk_elements)

    def encode(self, image: np.ndarray) -> List[np.ndarray]:
        """返回四个阶段的特征图，阶段 i 形状 H/2^{i+1} x W/2^{i+1} x D_i"""
        x = patch_embed(image, self.weights)
        pyramid = []
        for i, stage in enumerate(self.config.stages, start=1):
            if i > 1:
                x = downsample_stage(x, self.weights, f"patch_embed{i}.")
            for j in range(stage.depth):
                x = transformer_block(x, self.weights, f"block{i}.{j}.", self.attention[i - 1])
            x = layernorm(x, self.weights[f"norm{i}.gamma"], self.weights[f"norm{i}.beta"], eps=NORM_EPS)
            pyramid.append(x)
        return pyramid

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return decode_head(self.encode(image), self.weights, self.config.num_classes)


def encoder_forward(image: np.ndarray, config: ModelConfig, weights: Weights,
                    chunk_elements: Optional[int] = None) -> List[np.ndarray]:
    model = MixTransformer(config, weights, chunk_elements or DEFAULT_CHUNK_ELEMENTS)
    return model.encode(image)
