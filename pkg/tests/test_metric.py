"""Prototype metric: distances, fusion algebra, episode loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fslkit.autodiff import Tensor
from fslkit.errors import ShapeError
from fslkit.gradcheck import finite_diff_gradcheck
from fslkit.metric import (
    MetricParams,
    compute_prototypes,
    cosine_similarity,
    episode_logits_and_loss,
    score_matrix,
    similarity_score,
    squared_euclidean,
)
from fslkit.optim import SGD


class TestSquaredEuclidean:
    def test_identical_vectors(self):
        v = Tensor([1.0, -2.0, 3.0])
        assert squared_euclidean(v, Tensor(v.data.copy())).item() == 0.0

    def test_pythagorean(self):
        assert squared_euclidean(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 25.0

    def test_matches_loop_oracle(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            a, b = rng.standard_normal(8), rng.standard_normal(8)
            expected = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))
            got = squared_euclidean(Tensor(a), Tensor(b)).item()
            assert abs(got - expected) < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            squared_euclidean(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestCosine:
    def test_parallel(self):
        v = Tensor([1.0, 2.0, -1.0])
        assert abs(cosine_similarity(v, Tensor(v.data.copy())).item() - 1.0) < 1e-12

    def test_orthogonal(self):
        assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_positive_scale_invariance(self):
        got = cosine_similarity(Tensor([1.0, 1.0]), Tensor([2.0, 2.0])).item()
        assert abs(got - 1.0) < 1e-12
        for trial in range(20):
            rng = np.random.default_rng(trial)
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            c = float(rng.uniform(0.1, 10.0))
            base = cosine_similarity(Tensor(a), Tensor(b)).item()
            scaled = cosine_similarity(Tensor(c * a), Tensor(b)).item()
            assert abs(base - scaled) < 1e-12
            assert -1.0 - 1e-12 <= base <= 1.0 + 1e-12

    def test_zero_vector_is_safe(self):
        z = Tensor(np.zeros(3), requires_grad=True)
        out = cosine_similarity(z, Tensor([1.0, 0.0, 0.0]))
        assert out.item() == 0.0
        out.backward()
        assert np.all(np.isfinite(z.grad))


class TestPrototypes:
    def test_single_shot_is_the_embedding(self):
        emb = Tensor(np.array([[1.0, 2.0], [5.0, -1.0]]))
        protos = compute_prototypes(emb, [0, 1])
        np.testing.assert_array_equal(protos.embeddings.data, emb.data)
        assert protos.classes == [0, 1]

    def test_hand_mean(self):
        emb = Tensor(np.array([[1.0, 3.0], [3.0, 5.0]]))
        protos = compute_prototypes(emb, [0, 0])
        np.testing.assert_array_equal(protos.embeddings.data, [[2.0, 4.0]])

    def test_permutation_bit_exact(self):
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((6, 4))
        labels = np.array([0, 1, 2, 0, 1, 2])
        base = compute_prototypes(Tensor(emb), labels).embeddings.data
        perm = rng.permutation(6)
        permuted = compute_prototypes(Tensor(emb[perm]), labels[perm]).embeddings.data
        np.testing.assert_array_equal(base, permuted)

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            compute_prototypes(Tensor(np.zeros((2, 3))), [0, 0], num_classes=2)

    def test_differentiable_through_embeddings(self):
        emb = Tensor(np.random.default_rng(1).standard_normal((4, 3)), requires_grad=True)
        res, = finite_diff_gradcheck(
            lambda: (compute_prototypes(emb, [0, 0, 1, 1]).embeddings ** 2).sum(), [emb])
        assert res.passed


class TestSimilarityScore:
    def test_pure_euclidean_fusion(self):
        params = MetricParams.create(1.0, 0.0)
        q, p = Tensor([0.0, 0.0]), Tensor([3.0, 4.0])
        assert abs(similarity_score(q, p, params).item() - (-25.0)) < 1e-12

    def test_pure_cosine_fusion(self):
        params = MetricParams.create(0.0, 1.0)
        q, p = Tensor([1.0, 0.0]), Tensor([1.0, 1.0])
        assert abs(similarity_score(q, p, params).item() - 1.0 / math.sqrt(2.0)) < 1e-12

    def test_paper_init_hand_value(self):
        # query (2,0) against prototype (1, sqrt(3)): squared distance 4,
        # cosine 0.5 -> 1.24*(-4) + 0.1*0.5 = -4.91
        params = MetricParams.create(1.24, 0.1)
        q = Tensor([2.0, 0.0])
        p = Tensor([1.0, math.sqrt(3.0)])
        assert abs(similarity_score(q, p, params).item() - (-4.91)) <= 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.standard_normal(4), requires_grad=True)
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        params = MetricParams.create(1.24, 0.1)
        res = finite_diff_gradcheck(
            lambda: similarity_score(q, p, params),
            [q, p, params.euclid_weight, params.cosine_weight])
        assert all(r.passed for r in res)


class TestEpisodeLoss:
    def test_dominant_margin(self):
        protos = compute_prototypes(
            Tensor(np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])), [0, 1, 2])
        queries = Tensor(np.array([[0.0, 0.0]]))
        params = MetricParams.create(1.0, 0.0)
        logits, _ = episode_logits_and_loss(queries, [0], protos, params)
        probs = np.exp(logits.data - logits.data.max())
        probs /= probs.sum()
        assert logits.data.argmax() == 0
        assert probs[0, 0] > 0.99

    def test_identical_prototypes_uniform(self):
        protos = compute_prototypes(Tensor(np.ones((3, 4))), [0, 1, 2])
        queries = Tensor(np.random.default_rng(3).standard_normal((5, 4)))
        params = MetricParams.create(1.0, 0.5)
        _, loss = episode_logits_and_loss(queries, [0, 1, 2, 0, 1], protos, params)
        assert abs(loss.item() - math.log(3.0)) < 1e-12

    def test_two_way_hand_case(self):
        # scores (-1, -2) for label 0
        protos = compute_prototypes(Tensor(np.array([[1.0, 0.0], [1.0, 1.0]])), [0, 1])
        queries = Tensor(np.array([[0.0, 0.0]]))
        params = MetricParams.create(1.0, 0.0)
        logits, loss = episode_logits_and_loss(queries, [0], protos, params)
        np.testing.assert_allclose(logits.data, [[-1.0, -2.0]], atol=1e-12)
        assert abs(loss.item() - 0.3133) < 1e-4

    def test_label_out_of_range(self):
        protos = compute_prototypes(Tensor(np.zeros((2, 3))), [0, 1])
        with pytest.raises(ValueError):
            episode_logits_and_loss(Tensor(np.zeros((1, 3))), [2], protos,
                                    MetricParams.create())

    def test_loss_permutation_invariant(self):
        rng = np.random.default_rng(4)
        protos = compute_prototypes(Tensor(rng.standard_normal((3, 4))), [0, 1, 2])
        queries = rng.standard_normal((9, 4))
        labels = np.array([0, 1, 2] * 3)
        params = MetricParams.create(1.24, 0.1)
        _, base = episode_logits_and_loss(Tensor(queries), labels, protos, params)
        perm = rng.permutation(9)
        _, permuted = episode_logits_and_loss(Tensor(queries[perm]), labels[perm],
                                              protos, params)
        assert abs(base.item() - permuted.item()) < 1e-12

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_argmax_invariant_under_joint_positive_scaling(self, seed):
        rng = np.random.default_rng(seed)
        queries = Tensor(rng.standard_normal((6, 5)))
        protos = Tensor(rng.standard_normal((4, 5)))
        a, b = rng.uniform(0.1, 3.0, size=2)
        c = float(rng.uniform(0.01, 100.0))
        base = score_matrix(queries, protos, MetricParams.create(a, b)).data
        scaled = score_matrix(queries, protos, MetricParams.create(c * a, c * b)).data
        np.testing.assert_array_equal(base.argmax(axis=1), scaled.argmax(axis=1))

    def test_pure_euclidean_equals_nearest_prototype(self):
        for trial in range(10):
            rng = np.random.default_rng(50 + trial)
            queries = rng.standard_normal((8, 6))
            protos = rng.standard_normal((5, 6))
            logits = score_matrix(Tensor(queries), Tensor(protos),
                                  MetricParams.create(1.0, 0.0)).data
            dists = ((queries[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
            np.testing.assert_array_equal(logits.argmax(axis=1), dists.argmin(axis=1))

    def test_frozen_weights_take_no_gradient(self):
        rng = np.random.default_rng(5)
        params = MetricParams.create(1.0, 0.0, frozen=True)
        emb = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        protos = compute_prototypes(emb, [0, 0, 1, 1])
        _, loss = episode_logits_and_loss(Tensor(rng.standard_normal((2, 3))),
                                          [0, 1], protos, params)
        loss.backward()
        assert params.euclid_weight.grad is None
        assert params.cosine_weight.grad is None
        assert params.parameters() == []

    def test_cosine_only_signal_increases_cosine_weight(self):
        # prototypes oppose along x; the query is equidistant from both, so
        # only the cosine term separates; one step must raise its weight
        protos = compute_prototypes(Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]])), [0, 1])
        queries = Tensor(np.array([[0.5, 5.0], [-0.5, 5.0]]))
        # tilt queries slightly toward their true class so cosine separates
        params = MetricParams.create(1.0, 0.1)
        _, loss = episode_logits_and_loss(queries, [0, 1], protos, params)
        loss.backward()
        assert float(params.cosine_weight.grad) < 0.0
        before = float(params.cosine_weight.data)
        SGD(params.parameters(), lr=0.1, momentum=0.0).step()
        assert float(params.cosine_weight.data) > before

    def test_weight_gradients_match_finite_differences(self):
        for trial in range(10):
            rng = np.random.default_rng(60 + trial)
            params = MetricParams.create(float(rng.uniform(0.2, 2.0)),
                                         float(rng.uniform(-1.0, 1.0)))
            support = Tensor(rng.standard_normal((6, 4)))
            queries = Tensor(rng.standard_normal((9, 4)))
            slabels = [0, 0, 1, 1, 2, 2]
            qlabels = rng.integers(0, 3, size=9)

            def fn():
                protos = compute_prototypes(support, slabels, num_classes=3)
                _, loss = episode_logits_and_loss(queries, qlabels, protos, params)
                return loss

            res = finite_diff_gradcheck(fn, [params.euclid_weight, params.cosine_weight])
            assert all(r.passed for r in res)
