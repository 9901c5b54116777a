"""Desk-scale few-shot image classification toolkit.

Builds a complete few-shot pipeline on a minimal reverse-mode autodiff
core: a learnable image resizer that preserves detail plain downsampling
destroys, a compact convolutional backbone, prototype scoring under a
learnable fusion of Euclidean and cosine similarity, deterministic
episode sampling, and the three-stage training protocol that ties them
together.
"""

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
from .backbone import BackboneParams, HeadParams, backbone_forward, head_forward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DatasetIndex,
    Episode,
    generate_synthetic,
    load_dataset,
    sample_episode,
)
from .gradcheck import finite_diff_gradcheck
from .metric import (
    MetricParams,
    Prototypes,
    compute_prototypes,
    cosine_similarity,
    episode_logits_and_loss,
    similarity_score,
    squared_euclidean,
)
from .optim import SGD, Adam
from .pipeline import (
    TrainConfig,
    evaluate,
    finetune_stage,
    train_backbone_stage,
    train_joint_stage,
)
from .resizer import ResizerConfig, ResizerParams, init_resizer, resizer_forward

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BackboneParams",
    "Checkpoint",
    "DatasetIndex",
    "Episode",
    "HeadParams",
    "MetricParams",
    "Prototypes",
    "ResizerConfig",
    "ResizerParams",
    "SGD",
    "Tensor",
    "TrainConfig",
    "backbone_forward",
    "bilinear_resize",
    "compute_prototypes",
    "conv2d",
    "cosine_similarity",
    "cross_entropy_loss",
    "episode_logits_and_loss",
    "evaluate",
    "finetune_stage",
    "finite_diff_gradcheck",
    "gelu",
    "generate_synthetic",
    "global_avg_pool",
    "head_forward",
    "init_resizer",
    "linear",
    "load_checkpoint",
    "load_dataset",
    "max_pool2d",
    "resizer_forward",
    "sample_episode",
    "save_checkpoint",
    "sigmoid",
    "similarity_score",
    "softmax",
    "squared_euclidean",
    "train_backbone_stage",
    "train_joint_stage",
]
