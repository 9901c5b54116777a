"""Embedding network and classification head."""

import numpy as np
import pytest

from fslkit.autodiff import Tensor
from fslkit.backbone import (
    backbone_forward,
    head_forward,
    init_backbone,
    init_head,
    HeadParams,
)
from fslkit.errors import ShapeError
from fslkit.gradcheck import finite_diff_gradcheck


class TestBackbone:
    def test_embedding_shape(self):
        params = init_backbone(seed=0)
        img = Tensor(np.random.default_rng(0).standard_normal((1, 3, 16, 16)))
        assert backbone_forward(img, params).shape == (1, 32)

    def test_embedding_dim_independent_of_input_size(self):
        params = init_backbone(seed=0)
        for h, w in ((16, 16), (32, 32), (24, 40)):
            img = Tensor(np.random.default_rng(1).standard_normal((2, 3, h, w)))
            assert backbone_forward(img, params).shape == (2, 32)

    def test_zero_input_zero_embedding(self):
        params = init_backbone(seed=1)
        out = backbone_forward(Tensor(np.zeros((1, 3, 16, 16))), params)
        np.testing.assert_array_equal(out.data, np.zeros((1, 32)))

    def test_too_small_input(self):
        params = init_backbone(seed=0)
        with pytest.raises(ShapeError):
            backbone_forward(Tensor(np.zeros((1, 3, 15, 16))), params)

    def test_batch_permutation_equivariance(self):
        params = init_backbone(seed=2)
        rng = np.random.default_rng(3)
        imgs = rng.standard_normal((5, 3, 16, 16))
        perm = rng.permutation(5)
        base = backbone_forward(Tensor(imgs), params).data
        permuted = backbone_forward(Tensor(imgs[perm]), params).data
        np.testing.assert_array_equal(permuted, base[perm])

    def test_gradients(self):
        params = init_backbone(seed=4, width=8)
        rng = np.random.default_rng(5)
        img = Tensor(rng.standard_normal((1, 3, 16, 16)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 8)))
        res = finite_diff_gradcheck(
            lambda: (backbone_forward(img, params) * w).sum(),
            [img] + params.parameters(),
            names=["image"] + list(params.named_parameters().keys()),
            step=1e-5)
        assert all(r.passed for r in res), [r for r in res if not r.passed]

    def test_init_determinism(self):
        a = init_backbone(seed=9)
        b = init_backbone(seed=9)
        for ta, tb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data)


class TestHead:
    def test_identity_weight_passes_embedding(self):
        emb = np.random.default_rng(0).standard_normal((3, 4))
        head = HeadParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(head_forward(Tensor(emb), head).data, emb)

    def test_zero_head_gives_uniform_softmax(self):
        from fslkit.autodiff import cross_entropy_loss

        head = HeadParams(Tensor(np.zeros((6, 4))), Tensor(np.zeros(6)))
        logits = head_forward(Tensor(np.random.default_rng(1).standard_normal((2, 4))), head)
        loss = cross_entropy_loss(logits, [0, 5])
        assert abs(loss.item() - np.log(6.0)) < 1e-12

    def test_hand_case(self):
        head = HeadParams(Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([0.0, -1.0]))
        out = head_forward(Tensor([[3.0, 4.0]]), head)
        np.testing.assert_array_equal(out.data, [[3.0, 7.0]])

    def test_width_mismatch(self):
        head = init_head(seed=0, num_classes=5, embed_dim=8)
        with pytest.raises(ShapeError):
            head_forward(Tensor(np.zeros((1, 4))), head)
