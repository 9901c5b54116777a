"""Learnable image resizer that preserves detail plain downsampling loses.

The module wraps a fixed bilinear path with a learnable convolutional
path: a wide-kernel stem (7x7 then 1x1, GELU activations) runs at the
input resolution, its features are bilinearly resized to the target size
and refined by a stack of residual enhancement blocks with channel
attention, and a final 3x3 convolution projects back to image channels.
The projection is summed with the bilinearly resized raw image, so with
all-zero parameters the whole module reduces exactly to bilinear
resizing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    bilinear_resize,
    conv2d,
    fan_in_uniform,
    gelu,
    global_avg_pool,
    linear,
    sigmoid,
    zeros_param,
)
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ResizerConfig:
    """Architecture knobs for the learnable resizer."""

    out_h: int
    out_w: int
    in_channels: int = 3
    feature_channels: int = 16
    num_blocks: int = 4
    reduction: int = 4

    def __post_init__(self):
        if self.out_h < 1 or self.out_w < 1:
            raise ConfigError("output size must be at least 1x1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be at least 1")
        if self.reduction < 1:
            raise ConfigError("reduction must be positive")
        if self.feature_channels % self.reduction != 0:
            raise ConfigError(
                f"feature_channels ({self.feature_channels}) must be divisible "
                f"by reduction ({self.reduction})"
            )


@dataclass
class BlockParams:
    """Parameters of one residual enhancement block."""

    conv_a_kernel: Tensor
    conv_a_bias: Tensor
    conv_b_kernel: Tensor
    conv_b_bias: Tensor
    attn_squeeze_weight: Tensor
    attn_squeeze_bias: Tensor
    attn_excite_weight: Tensor
    attn_excite_bias: Tensor


@dataclass
class ResizerParams:
    """All learnable tensors of the resizer, in forward order."""

    conv7_kernel: Tensor
    conv7_bias: Tensor
    conv1_kernel: Tensor
    conv1_bias: Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    out_kernel: Tensor = None
    out_bias: Tensor = None

    def named_parameters(self) -> dict[str, Tensor]:
        named = {
            "conv7.kernel": self.conv7_kernel,
            "conv7.bias": self.conv7_bias,
            "conv1.kernel": self.conv1_kernel,
            "conv1.bias": self.conv1_bias,
        }
        for i, blk in enumerate(self.blocks):
            named[f"block{i}.conv_a.kernel"] = blk.conv_a_kernel
            named[f"block{i}.conv_a.bias"] = blk.conv_a_bias
            named[f"block{i}.conv_b.kernel"] = blk.conv_b_kernel
            named[f"block{i}.conv_b.bias"] = blk.conv_b_bias
            named[f"block{i}.attn.squeeze_weight"] = blk.attn_squeeze_weight
            named[f"block{i}.attn.squeeze_bias"] = blk.attn_squeeze_bias
            named[f"block{i}.attn.excite_weight"] = blk.attn_excite_weight
            named[f"block{i}.attn.excite_bias"] = blk.attn_excite_bias
        named["conv_out.kernel"] = self.out_kernel
        named["conv_out.bias"] = self.out_bias
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_(self) -> None:
        """Set every parameter to zero (turns the resizer into plain bilinear)."""
        for p in self.parameters():
            p.data[...] = 0.0


def parameter_count(config: ResizerConfig) -> int:
    """Closed-form number of scalar parameters for ``config``."""
    c, f, r = config.in_channels, config.feature_channels, config.reduction
    stem = (f * c * 49 + f) + (f * f + f)
    block = 2 * (f * f * 9 + f) + (f // r * f + f // r) + (f * f // r + f)
    final = c * f * 9 + c
    return stem + config.num_blocks * block + final


def init_resizer(config: ResizerConfig, seed: int) -> ResizerParams:
    """Fan-in-scaled uniform kernels, zero biases, from a seeded generator.

    Identical ``(config, seed)`` pairs produce bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    c, f, r = config.in_channels, config.feature_channels, config.reduction
    params = ResizerParams(
        conv7_kernel=fan_in_uniform(rng, (f, c, 7, 7), c * 49),
        conv7_bias=zeros_param((f,)),
        conv1_kernel=fan_in_uniform(rng, (f, f, 1, 1), f),
        conv1_bias=zeros_param((f,)),
    )
    for _ in range(config.num_blocks):
        params.blocks.append(
            BlockParams(
                conv_a_kernel=fan_in_uniform(rng, (f, f, 3, 3), f * 9),
                conv_a_bias=zeros_param((f,)),
                conv_b_kernel=fan_in_uniform(rng, (f, f, 3, 3), f * 9),
                conv_b_bias=zeros_param((f,)),
                attn_squeeze_weight=fan_in_uniform(rng, (f // r, f), f),
                attn_squeeze_bias=zeros_param((f // r,)),
                attn_excite_weight=fan_in_uniform(rng, (f, f // r), f // r),
                attn_excite_bias=zeros_param((f,)),
            )
        )
    params.out_kernel = fan_in_uniform(rng, (c, f, 3, 3), f * 9)
    params.out_bias = zeros_param((c,))
    return params


def channel_attention(
    features: Tensor,
    squeeze_weight: Tensor,
    squeeze_bias: Tensor,
    excite_weight: Tensor,
    excite_bias: Tensor,
) -> Tensor:
    """Scale each channel by a gate in (0, 1) computed from pooled features.

    gate = sigmoid(excite(gelu(squeeze(global_avg_pool(features))))),
    broadcast over the spatial axes.
    """
    if features.data.ndim != 4:
        raise ShapeError("channel_attention expects a 4-d feature map")
    n, f = features.data.shape[:2]
    if squeeze_weight.data.shape[1] != f or excite_weight.data.shape[0] != f:
        raise ShapeError(
            f"attention weights sized for {squeeze_weight.data.shape[1]} channels, "
            f"features have {f}"
        )
    pooled = global_avg_pool(features)
    gate = sigmoid(linear(gelu(linear(pooled, squeeze_weight, squeeze_bias)),
                          excite_weight, excite_bias))
    return features * gate.reshape(n, f, 1, 1)


def resizer_block(features: Tensor, block: BlockParams) -> Tensor:
    """Residual enhancement: two 3x3 convolutions with a GELU between them,
    channel attention on the branch, then an identity skip."""
    branch = conv2d(features, block.conv_a_kernel, block.conv_a_bias, padding=1, stride=1)
    branch = gelu(branch)
    branch = conv2d(branch, block.conv_b_kernel, block.conv_b_bias, padding=1, stride=1)
    branch = channel_attention(
        branch,
        block.attn_squeeze_weight,
        block.attn_squeeze_bias,
        block.attn_excite_weight,
        block.attn_excite_bias,
    )
    return features + branch


def resizer_forward(image: Tensor, params: ResizerParams, config: ResizerConfig) -> Tensor:
    """Resize ``(N, C, H, W)`` images to ``(N, C, out_h, out_w)``.

    The bilinear skip of the raw image is always present, so the learnable
    path only ever adds detail on top of plain downsampling.
    """
    if image.data.ndim != 4:
        raise ShapeError("resizer_forward expects a 4-d image batch")
    n, c, h, w = image.data.shape
    if c != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} channels, got {c}")
    if h < 7 or w < 7:
        raise ShapeError("input must be at least 7x7 for the 7x7 stem")
    skip = bilinear_resize(image, config.out_h, config.out_w)
    feats = gelu(conv2d(image, params.conv7_kernel, params.conv7_bias, padding=3, stride=1))
    feats = gelu(conv2d(feats, params.conv1_kernel, params.conv1_bias, padding=0, stride=1))
    base = bilinear_resize(feats, config.out_h, config.out_w)
    x = base
    for block in params.blocks:
        x = resizer_block(x, block)
    projected = conv2d(x + base, params.out_kernel, params.out_bias, padding=1, stride=1)
    return projected + skip
