"""Model contracts: shapes, softmax, pooled descriptor, head extension,
init determinism, and a finite-difference check of the forward pass."""

import numpy as np
import pytest
import torch

from ctxseg.model import (
    ArchConfig,
    SegModel,
    extend_head,
    freeze,
    image_to_tensor,
    load_checkpoint,
    phi_pool,
    save_checkpoint,
    softmax_scores,
)

TINY = ArchConfig(widths=(4,), feature_channels=4, gn_groups=2)
SMALL = ArchConfig(widths=(8, 12), feature_channels=8, gn_groups=4)


class TestForward:
    def test_output_shapes_match_input(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        f, s = m.forward_single(torch.rand(3, 32, 24))
        assert f.shape == (8, 32, 24)
        assert s.shape == (4, 32, 24)

    def test_indivisible_input_raises(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        with pytest.raises(ValueError):
            m.forward_single(torch.rand(3, 30, 30))

    def test_zero_weight_head_gives_uniform_softmax(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
        _, s = m.forward_single(torch.rand(3, 16, 16))
        assert torch.all(s == 0)
        p = softmax_scores(s)
        assert torch.allclose(p, torch.full_like(p, 0.25))

    def test_init_and_forward_deterministic(self):
        x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(5))
        m1 = SegModel(SMALL, num_fg_classes=2, seed=7)
        m2 = SegModel(SMALL, num_fg_classes=2, seed=7)
        _, s1 = m1.forward_single(x)
        _, s2 = m2.forward_single(x)
        assert torch.equal(s1, s2)

    def test_different_seeds_differ(self):
        m1 = SegModel(SMALL, num_fg_classes=2, seed=0)
        m2 = SegModel(SMALL, num_fg_classes=2, seed=1)
        assert not torch.equal(m1.head.weight, m2.head.weight) or not torch.equal(
            m1.encoder[0][0].weight, m2.encoder[0][0].weight
        )

    def test_score_sum_gradient_matches_finite_differences(self):
        m = SegModel(TINY, num_fg_classes=2, seed=0).double()
        x = torch.rand(3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

        def loss_fn():
            _, s = m.forward_single(x)
            return s.sum()

        loss_fn().backward()
        analytic = torch.cat([p.grad.reshape(-1) for p in m.parameters()])
        fd = []
        h = 1e-6
        with torch.no_grad():
            for p in m.parameters():
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = float(loss_fn())
                    flat[i] = orig - h
                    dn = float(loss_fn())
                    flat[i] = orig
                    fd.append((up - dn) / (2 * h))
        fd = torch.tensor(fd, dtype=torch.float64)
        rel = torch.linalg.norm(analytic - fd) / torch.linalg.norm(fd)
        assert rel < 1e-4


class TestSoftmax:
    def test_uniform_on_equal_scores(self):
        s = torch.zeros(3, 1, 1, dtype=torch.float64)
        p = softmax_scores(s)
        assert torch.allclose(p, torch.full_like(p, 1 / 3))

    def test_hand_value(self):
        s = torch.tensor([[[np.log(2.0)]], [[0.0]], [[0.0]]], dtype=torch.float64)
        p = softmax_scores(s)
        expect = torch.tensor([[[0.5]], [[0.25]], [[0.25]]], dtype=torch.float64)
        assert torch.allclose(p, expect, atol=1e-12)

    def test_shift_invariance(self):
        g = torch.Generator().manual_seed(2)
        s = torch.rand(4, 3, 3, generator=g, dtype=torch.float64)
        assert torch.allclose(softmax_scores(s), softmax_scores(s + 3.7), atol=1e-12)

    def test_sums_to_one(self):
        g = torch.Generator().manual_seed(3)
        s = torch.rand(5, 6, 6, generator=g) * 10
        p = softmax_scores(s)
        assert torch.allclose(p.sum(dim=0), torch.ones(6, 6), atol=1e-6)
        assert torch.all(p > 0) and torch.all(p < 1)


class TestPhiPool:
    def test_constant_map(self):
        f = torch.full((2, 3, 5), 4.2, dtype=torch.float64)
        d = phi_pool(f)
        assert d.shape == (8, 2)
        assert torch.allclose(d, torch.full_like(d, 4.2))

    def test_1x1_hand(self):
        f = torch.tensor([[[2.0]]], dtype=torch.float64)
        d = phi_pool(f)
        assert d.shape == (2, 1)
        assert torch.equal(d, torch.tensor([[2.0], [2.0]], dtype=torch.float64))

    def test_2x2_hand(self):
        f = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]], dtype=torch.float64)
        d = phi_pool(f)
        assert d.shape == (4, 1)
        assert torch.equal(d.reshape(-1), torch.tensor([2.0, 6.0, 3.0, 5.0], dtype=torch.float64))

    def test_linearity(self):
        g = torch.Generator().manual_seed(4)
        f1 = torch.rand(3, 4, 6, generator=g, dtype=torch.float64)
        f2 = torch.rand(3, 4, 6, generator=g, dtype=torch.float64)
        lhs = phi_pool(2.5 * f1 - 1.5 * f2)
        rhs = 2.5 * phi_pool(f1) - 1.5 * phi_pool(f2)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_batched_matches_single(self):
        g = torch.Generator().manual_seed(5)
        f = torch.rand(2, 3, 4, 6, generator=g)
        batched = phi_pool(f)
        assert batched.shape == (2, 10, 3)
        assert torch.allclose(batched[0], phi_pool(f[0]))
        assert torch.allclose(batched[1], phi_pool(f[1]))


class TestExtendHead:
    def test_extend_by_zero_is_identity(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        m2 = extend_head(m, 0)
        for a, b in zip(m.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_old_scores_preserved(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(6))
        _, before = m.forward_single(x)
        m2 = extend_head(m, 1)
        _, after = m2.forward_single(x)
        assert after.shape[0] == before.shape[0] + 1
        assert torch.equal(after[: before.shape[0]], before)

    def test_channel_arithmetic(self):
        m = SegModel(SMALL, num_fg_classes=15, seed=0)
        assert m.num_channels == 16
        m2 = extend_head(m, 5)
        assert m2.num_channels == 21

    def test_new_bias_equals_background_bias(self):
        m = SegModel(SMALL, num_fg_classes=2, seed=0)
        m2 = extend_head(m, 3)
        assert torch.all(m2.head.bias[3:] == m.head.bias[0])
        assert torch.all(m2.head.weight[3:] == 0)

    def test_original_model_untouched(self):
        m = SegModel(SMALL, num_fg_classes=2, seed=0)
        before = {k: v.clone() for k, v in m.state_dict().items()}
        extend_head(m, 4)
        for k, v in m.state_dict().items():
            assert torch.equal(v, before[k])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = SegModel(SMALL, num_fg_classes=4, seed=3)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(m, path, [[1, 2], [3, 4]])
        loaded, inventory = load_checkpoint(path)
        assert inventory == [[1, 2], [3, 4]]
        x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7))
        _, s1 = m.forward_single(x)
        _, s2 = loaded.forward_single(x)
        assert torch.equal(s1, s2)


class TestFreeze:
    def test_frozen_params_require_no_grad(self):
        m = SegModel(SMALL, num_fg_classes=2, seed=0)
        snap = freeze(m)
        assert all(not p.requires_grad for p in snap.parameters())
        # snapshot is bit-identical but independent
        for a, b in zip(m.parameters(), snap.parameters()):
            assert torch.equal(a, b)
            assert a.data_ptr() != b.data_ptr()


def test_image_to_tensor_layout():
    img = np.zeros((4, 6, 3), dtype=np.float32)
    img[0, 1, 2] = 0.5
    t = image_to_tensor(img)
    assert t.shape == (3, 4, 6)
    assert t[2, 0, 1] == pytest.approx(0.5)
