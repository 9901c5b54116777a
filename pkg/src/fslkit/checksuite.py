"""Finite-difference verification suite covering every differentiable op.

Each entry builds a small randomized instance of one operation (or a
composition ending in the episode loss), scalarizes it with fixed random
weights where needed, and checks every parameter element against central
differences. Shapes are kept tiny so the whole suite runs in well under
two minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    bilinear_resize,
    conv2d,
    cross_entropy_loss,
    gelu,
    global_avg_pool,
    linear,
    max_pool2d,
    sigmoid,
    softmax,
)
from .backbone import backbone_forward, init_backbone
from .gradcheck import finite_diff_gradcheck
from .metric import (
    MetricParams,
    compute_prototypes,
    episode_logits_and_loss,
    score_matrix,
    similarity_score,
)
from .resizer import (
    ResizerConfig,
    channel_attention,
    init_resizer,
    resizer_block,
    resizer_forward,
)


@dataclass
class SuiteEntry:
    """Aggregated gradcheck outcome for one operation."""

    op: str
    max_rel_error: float
    passed: bool
    checked_params: int


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def default_suite(seed: int = 0, rtol: float = 1e-4) -> list[SuiteEntry]:
    """Run the whole verification suite and return one entry per op."""
    entries: list[SuiteEntry] = []

    def run(op: str, fn, params, names, step: float = 1e-4):
        results = finite_diff_gradcheck(fn, params, names=names, rtol=rtol, step=step)
        entries.append(
            SuiteEntry(
                op=op,
                max_rel_error=max(r.max_rel_error for r in results),
                passed=all(r.passed for r in results),
                checked_params=len(results),
            )
        )

    rng = np.random.default_rng(seed)

    # conv2d, two padding/stride regimes
    x = _param(rng, 2, 3, 5, 5)
    k = _param(rng, 4, 3, 3, 3)
    b = _param(rng, 4)
    w = rng.standard_normal((2, 4, 3, 3))
    run("conv2d[pad1,stride2]",
        lambda: _weighted_sum(conv2d(x, k, b, padding=1, stride=2), w[:, :, :3, :3]),
        [x, k, b], ["x", "kernel", "bias"])
    w2 = rng.standard_normal((2, 4, 3, 3))
    run("conv2d[pad0,stride1]",
        lambda: _weighted_sum(conv2d(x, k, b, padding=0, stride=1), w2),
        [x, k, b], ["x", "kernel", "bias"])

    x = _param(rng, 1, 2, 5, 7)
    w = rng.standard_normal((1, 2, 3, 4))
    run("bilinear_resize[down]",
        lambda: _weighted_sum(bilinear_resize(x, 3, 4), w), [x], ["x"])
    w = rng.standard_normal((1, 2, 8, 9))
    run("bilinear_resize[up]",
        lambda: _weighted_sum(bilinear_resize(x, 8, 9), w), [x], ["x"])

    x = _param(rng, 4, 5)
    w = rng.standard_normal((4, 5))
    run("gelu", lambda: _weighted_sum(gelu(x), w), [x], ["x"])
    run("sigmoid", lambda: _weighted_sum(sigmoid(x), w), [x], ["x"])

    x = _param(rng, 3, 4)
    wt = _param(rng, 2, 4)
    b = _param(rng, 2)
    w = rng.standard_normal((3, 2))
    run("linear", lambda: _weighted_sum(linear(x, wt, b), w),
        [x, wt, b], ["x", "weight", "bias"])

    x = _param(rng, 2, 3, 4, 4)
    w = rng.standard_normal((2, 3))
    run("global_avg_pool", lambda: _weighted_sum(global_avg_pool(x), w), [x], ["x"])

    x = _param(rng, 1, 2, 6, 6)
    w = rng.standard_normal((1, 2, 3, 3))
    run("max_pool2d", lambda: _weighted_sum(max_pool2d(x), w), [x], ["x"])

    x = _param(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    run("softmax", lambda: _weighted_sum(softmax(x), w), [x], ["x"])

    logits = _param(rng, 4, 5)
    labels = [0, 2, 4, 1]
    run("softmax+cross_entropy",
        lambda: cross_entropy_loss(logits, labels), [logits], ["logits"])

    feats = _param(rng, 2, 4, 3, 3)
    sq_w, sq_b = _param(rng, 1, 4), _param(rng, 1)
    ex_w, ex_b = _param(rng, 4, 1), _param(rng, 4)
    w = rng.standard_normal((2, 4, 3, 3))
    run("channel_attention",
        lambda: _weighted_sum(channel_attention(feats, sq_w, sq_b, ex_w, ex_b), w),
        [feats, sq_w, sq_b, ex_w, ex_b],
        ["features", "squeeze_w", "squeeze_b", "excite_w", "excite_b"])

    block_cfg = ResizerConfig(out_h=4, out_w=4, in_channels=3,
                              feature_channels=4, num_blocks=1, reduction=4)
    block_params = init_resizer(block_cfg, seed=seed + 1)
    blk = block_params.blocks[0]
    feats = _param(rng, 1, 4, 5, 5)
    w = rng.standard_normal((1, 4, 5, 5))
    blk_tensors = [blk.conv_a_kernel, blk.conv_a_bias, blk.conv_b_kernel, blk.conv_b_bias,
                   blk.attn_squeeze_weight, blk.attn_squeeze_bias,
                   blk.attn_excite_weight, blk.attn_excite_bias]
    run("resizer_block",
        lambda: _weighted_sum(resizer_block(feats, blk), w),
        [feats] + blk_tensors,
        ["features", "conv_a_k", "conv_a_b", "conv_b_k", "conv_b_b",
         "sq_w", "sq_b", "ex_w", "ex_b"])

    rz_cfg = ResizerConfig(out_h=4, out_w=4, in_channels=3,
                           feature_channels=8, num_blocks=1, reduction=4)
    rz = init_resizer(rz_cfg, seed=seed + 2)
    image = _param(rng, 1, 3, 8, 8)
    w = rng.standard_normal((1, 3, 4, 4))
    run("resizer_forward",
        lambda: _weighted_sum(resizer_forward(image, rz, rz_cfg), w),
        [image] + rz.parameters(),
        ["image"] + list(rz.named_parameters().keys()))

    bb = init_backbone(seed + 3, in_channels=3, width=8)
    image = _param(rng, 1, 3, 16, 16)
    w = rng.standard_normal((1, 8))
    # deep compositions carry large third derivatives; a finer probe step
    # keeps central-difference truncation error well below the tolerance
    run("backbone_forward",
        lambda: _weighted_sum(backbone_forward(image, bb), w),
        [image] + bb.parameters(),
        ["image"] + list(bb.named_parameters().keys()),
        step=1e-5)

    q = _param(rng, 3)
    proto = _param(rng, 3)
    fusion = MetricParams.create(1.24, 0.1)
    run("similarity_score",
        lambda: similarity_score(q, proto, fusion),
        [q, proto, fusion.euclid_weight, fusion.cosine_weight],
        ["query", "prototype", "euclid_weight", "cosine_weight"])

    support = _param(rng, 4, 3)
    queries = _param(rng, 6, 3)
    support_labels = [0, 0, 1, 1]
    query_labels = [0, 1, 0, 1, 0, 1]
    fusion2 = MetricParams.create(1.24, 0.1)

    def episode_fn():
        protos = compute_prototypes(support, support_labels, num_classes=2)
        _, loss = episode_logits_and_loss(queries, query_labels, protos, fusion2)
        return loss

    run("episode_logits_and_loss", episode_fn,
        [support, queries, fusion2.euclid_weight, fusion2.cosine_weight],
        ["support", "queries", "euclid_weight", "cosine_weight"])

    # full pipeline on a 2-way 1-shot toy episode: resizer -> backbone ->
    # prototypes -> fused scores -> cross entropy
    micro_cfg = ResizerConfig(out_h=16, out_w=16, in_channels=3,
                              feature_channels=4, num_blocks=1, reduction=4)
    micro_resizer = init_resizer(micro_cfg, seed=seed + 4)
    micro_backbone = init_backbone(seed + 5, in_channels=3, width=4)
    fusion3 = MetricParams.create(1.24, 0.1)
    episode_images = Tensor(rng.standard_normal((4, 3, 16, 16)))

    def full_fn():
        resized = resizer_forward(episode_images, micro_resizer, micro_cfg)
        emb = backbone_forward(resized, micro_backbone)
        protos = compute_prototypes(emb[:2], [0, 1], num_classes=2)
        logits = score_matrix(emb[2:], protos, fusion3)
        return cross_entropy_loss(logits, [0, 1])

    full_params = (micro_resizer.parameters() + micro_backbone.parameters()
                   + [fusion3.euclid_weight, fusion3.cosine_weight])
    full_names = ([f"resizer.{n}" for n in micro_resizer.named_parameters()]
                  + [f"backbone.{n}" for n in micro_backbone.named_parameters()]
                  + ["euclid_weight", "cosine_weight"])
    run("full_episode_pipeline", full_fn, full_params, full_names, step=1e-5)

    return entries
