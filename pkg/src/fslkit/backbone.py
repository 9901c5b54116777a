"""Compact four-stage convolutional embedding network and its training head.

Each stage is conv3x3 (padding 1) -> GELU -> 2x2 max pool; a global
average pool turns the final feature map into a fixed-width embedding, so
the embedding dimension never depends on input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    fan_in_uniform,
    gelu,
    global_avg_pool,
    linear,
    max_pool2d,
    zeros_param,
)
from .errors import ShapeError

DEFAULT_WIDTH = 32
NUM_STAGES = 4
MIN_INPUT = 2**NUM_STAGES


@dataclass
class BackboneParams:
    kernels: list[Tensor]
    biases: list[Tensor]

    @property
    def embed_dim(self) -> int:
        return self.kernels[-1].data.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            named[f"stage{i}.kernel"] = k
            named[f"stage{i}.bias"] = b
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def init_backbone(seed: int, in_channels: int = 3, width: int = DEFAULT_WIDTH) -> BackboneParams:
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    chans = in_channels
    for _ in range(NUM_STAGES):
        kernels.append(fan_in_uniform(rng, (width, chans, 3, 3), chans * 9))
        biases.append(zeros_param((width,)))
        chans = width
    return BackboneParams(kernels, biases)


def init_head(seed: int, num_classes: int, embed_dim: int = DEFAULT_WIDTH) -> HeadParams:
    rng = np.random.default_rng(seed)
    return HeadParams(
        weight=fan_in_uniform(rng, (num_classes, embed_dim), embed_dim),
        bias=zeros_param((num_classes,)),
    )


def backbone_forward(image: Tensor, params: BackboneParams) -> Tensor:
    """Embed ``(N, C, H, W)`` images as ``(N, width)`` vectors; needs
    H, W >= 16 so all four pooling stages fit."""
    if image.data.ndim != 4:
        raise ShapeError("backbone_forward expects a 4-d image batch")
    h, w = image.data.shape[2:]
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ShapeError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
    x = image
    for kernel, bias in zip(params.kernels, params.biases):
        x = conv2d(x, kernel, bias, padding=1, stride=1)
        x = gelu(x)
        x = max_pool2d(x, size=2, stride=2)
    return global_avg_pool(x)


def head_forward(embedding: Tensor, params: HeadParams) -> Tensor:
    """Classification logits from embeddings."""
    if embedding.data.ndim != 2:
        raise ShapeError("head_forward expects a 2-d embedding batch")
    if embedding.data.shape[1] != params.weight.data.shape[1]:
        raise ShapeError(
            f"embedding width {embedding.data.shape[1]} does not match head "
            f"width {params.weight.data.shape[1]}"
        )
    return linear(embedding, params.weight, params.bias)
