"""Prototype classification with a learnable two-metric similarity.

A query is scored against each class prototype by a weighted fusion of
two views: the negated squared Euclidean distance (proximity) and the
cosine similarity (direction). Both weights are learnable scalars; with
weights (1, 0) the scorer is exactly nearest-prototype classification,
with (0, 1) it is pure cosine scoring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, cross_entropy_loss
from .errors import ShapeError

NORM_EPS = 1e-12


@dataclass
class MetricParams:
    """Learnable fusion weights for the similarity score.

    ``frozen=True`` fixes both weights (preset mode): they take no part in
    gradient accumulation or optimizer updates.
    """

    euclid_weight: Tensor
    cosine_weight: Tensor
    frozen: bool = False

    @classmethod
    def create(cls, euclid: float = 1.24, cosine: float = 0.1, frozen: bool = False
               ) -> "MetricParams":
        trainable = not frozen
        return cls(
            euclid_weight=Tensor(float(euclid), requires_grad=trainable),
            cosine_weight=Tensor(float(cosine), requires_grad=trainable),
            frozen=frozen,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return {"euclid_weight": self.euclid_weight, "cosine_weight": self.cosine_weight}

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else [self.euclid_weight, self.cosine_weight]

    def values(self) -> tuple[float, float]:
        return float(self.euclid_weight.data), float(self.cosine_weight.data)


@dataclass
class Prototypes:
    """Per-class mean embeddings; row ``i`` represents ``classes[i]``."""

    embeddings: Tensor
    classes: list[int]


def _check_vector_pair(a: Tensor, b: Tensor) -> None:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("expected 1-d vectors")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"vector widths differ: {a.data.shape} vs {b.data.shape}")


def squared_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared coordinate differences."""
    _check_vector_pair(a, b)
    return ((a - b) ** 2).sum()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, with norms floored at 1e-12."""
    _check_vector_pair(a, b)
    dot = (a * b).sum()
    na = ((a**2).sum().clamp_min(NORM_EPS**2)).sqrt()
    nb = ((b**2).sum().clamp_min(NORM_EPS**2)).sqrt()
    return dot / (na * nb)


def pairwise_squared_euclidean(queries: Tensor, protos: Tensor) -> Tensor:
    """All squared distances between ``(Q, d)`` queries and ``(N, d)`` rows."""
    q, d = queries.data.shape
    n = protos.data.shape[0]
    diff = queries.reshape(q, 1, d) - protos.reshape(1, n, d)
    return (diff**2).sum(axis=2)


def pairwise_cosine(queries: Tensor, protos: Tensor) -> Tensor:
    """All cosine similarities between ``(Q, d)`` queries and ``(N, d)`` rows."""
    dot = queries @ protos.t()
    qn = ((queries**2).sum(axis=1, keepdims=True).clamp_min(NORM_EPS**2)).sqrt()
    pn = ((protos**2).sum(axis=1, keepdims=True).clamp_min(NORM_EPS**2)).sqrt()
    return dot / (qn * pn.t())


def compute_prototypes(
    support_embeddings: Tensor,
    labels: Sequence[int],
    num_classes: int | None = None,
) -> Prototypes:
    """Mean embedding per class, differentiable through the embeddings.

    Summation order is fixed (class-major, then sample index) so permuting
    the support set leaves the result bit-identical.
    """
    labels = np.asarray(labels, dtype=np.int64)
    s = support_embeddings.data.shape[0]
    if labels.shape != (s,):
        raise ValueError(f"expected {s} labels, got shape {labels.shape}")
    if num_classes is None:
        classes = sorted(set(int(v) for v in labels))
    else:
        classes = list(range(num_classes))
    weights = np.zeros((len(classes), s))
    for row, cls in enumerate(classes):
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            raise ValueError(f"class {cls} has no support samples")
        weights[row, members] = 1.0 / members.size
    return Prototypes(Tensor(weights) @ support_embeddings, classes)


def score_matrix(query_embeddings: Tensor, prototypes: Prototypes | Tensor,
                 params: MetricParams) -> Tensor:
    """Similarity of every query against every prototype: ``(Q, N)``.

    score = euclid_weight * (-squared_euclidean) + cosine_weight * cosine.
    The Euclidean term is negated so larger always means more similar.
    """
    protos = prototypes.embeddings if isinstance(prototypes, Prototypes) else prototypes
    if query_embeddings.data.ndim != 2 or protos.data.ndim != 2:
        raise ShapeError("score_matrix expects 2-d embeddings")
    if query_embeddings.data.shape[1] != protos.data.shape[1]:
        raise ShapeError(
            f"embedding widths differ: {query_embeddings.data.shape[1]} vs "
            f"{protos.data.shape[1]}"
        )
    neg_dist = -pairwise_squared_euclidean(query_embeddings, protos)
    cos = pairwise_cosine(query_embeddings, protos)
    return params.euclid_weight * neg_dist + params.cosine_weight * cos


def similarity_score(query_embedding: Tensor, prototype: Tensor, params: MetricParams) -> Tensor:
    """Fused similarity of one query embedding against one prototype."""
    _check_vector_pair(query_embedding, prototype)
    d = query_embedding.data.shape[0]
    out = score_matrix(query_embedding.reshape(1, d), prototype.reshape(1, d), params)
    return out.reshape(())


def episode_logits_and_loss(
    query_embeddings: Tensor,
    query_labels: Sequence[int],
    prototypes: Prototypes,
    params: MetricParams,
) -> tuple[Tensor, Tensor]:
    """Score all queries against all prototypes and take the mean
    cross-entropy over the per-query softmax across classes."""
    labels = np.asarray(query_labels, dtype=np.int64)
    n_way = prototypes.embeddings.data.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_way):
        raise ValueError(f"label out of range for {n_way} classes")
    logits = score_matrix(query_embeddings, prototypes, params)
    loss = cross_entropy_loss(logits, labels)
    return logits, loss
