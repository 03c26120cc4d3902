"""Fusion rule, acceptance ratio and old-pixel extraction."""

import numpy as np
import pytest
import torch

from ctxseg.model import ArchConfig, SegModel
from ctxseg.pseudo import PixelSet, fuse_targets, old_pixel_set, predict_pseudo

SMALL = ArchConfig(widths=(8, 12), feature_channels=8, gn_groups=4)


class TestPredictPseudo:
    def test_requires_old_model(self):
        with pytest.raises(ValueError):
            predict_pseudo(None, np.zeros((8, 8, 3), dtype=np.float32))

    def test_uniform_model_confidence(self):
        m = SegModel(SMALL, num_fg_classes=3, seed=0)
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
        labels, conf = predict_pseudo(m, np.random.default_rng(0).random((16, 16, 3)).astype(np.float32))
        assert np.allclose(conf, 1.0 / 4)
        assert labels.shape == (16, 16)

    def test_deterministic(self):
        m = SegModel(SMALL, num_fg_classes=2, seed=1)
        img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
        l1, c1 = predict_pseudo(m, img)
        l2, c2 = predict_pseudo(m, img)
        assert np.array_equal(l1, l2)
        assert np.array_equal(c1, c2)

    def test_biased_head_argmax(self):
        # tilt the head so one class dominates everywhere
        m = SegModel(SMALL, num_fg_classes=2, seed=0)
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
            m.head.bias[1] = 5.0
        labels, conf = predict_pseudo(m, np.full((8, 8, 3), 0.5, dtype=np.float32))
        assert np.all(labels == 1)
        assert np.all(conf > 0.9)


class TestFuseTargets:
    def test_hand_2x2(self):
        gt = np.array([[16, 0], [0, 255]], dtype=np.uint8)
        pseudo = np.array([[3, 5], [0, 2]], dtype=np.int64)
        conf = np.array([[0.9, 0.9], [0.9, 0.4]])
        rt = fuse_targets(gt, pseudo, conf, tau=0.5)
        assert np.array_equal(rt.labels, np.array([[16, 5], [0, 255]], dtype=np.uint8))
        assert rt.beta == pytest.approx(0.5)
        assert np.array_equal(rt.accepted_mask, np.array([[False, True], [False, False]]))

    def test_all_new_class_gt(self):
        gt = np.full((3, 3), 2, dtype=np.uint8)
        pseudo = np.ones((3, 3), dtype=np.int64)
        conf = np.full((3, 3), 0.99)
        rt = fuse_targets(gt, pseudo, conf, tau=0.5)
        assert np.array_equal(rt.labels, gt)
        assert rt.beta == 0.0

    def test_tau_one_rejects_everything(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        pseudo = np.ones((4, 4), dtype=np.int64)
        conf = np.full((4, 4), 0.97)
        rt = fuse_targets(gt, pseudo, conf, tau=1.0)
        assert rt.beta == 0.0
        assert np.all(rt.labels == 255)

    def test_background_agreement_stays_background(self):
        gt = np.zeros((2, 2), dtype=np.uint8)
        pseudo = np.zeros((2, 2), dtype=np.int64)
        conf = np.full((2, 2), 0.99)
        rt = fuse_targets(gt, pseudo, conf, tau=0.5)
        assert np.all(rt.labels == 0)
        assert rt.beta == 0.0  # no candidates at all

    def test_new_class_pixels_never_overwritten(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            gt = rng.choice([0, 7, 255], size=(6, 6), p=[0.5, 0.3, 0.2]).astype(np.uint8)
            pseudo = rng.integers(0, 4, size=(6, 6))
            conf = rng.random((6, 6))
            rt = fuse_targets(gt, pseudo, conf, tau=0.5)
            new = gt == 7
            assert np.array_equal(rt.labels[new], gt[new])

    def test_beta_monotone_in_tau(self):
        rng = np.random.default_rng(1)
        gt = rng.choice([0, 9, 255], size=(12, 12), p=[0.6, 0.2, 0.2]).astype(np.uint8)
        pseudo = rng.integers(0, 5, size=(12, 12))
        conf = rng.random((12, 12))
        betas = [fuse_targets(gt, pseudo, conf, tau).beta for tau in np.linspace(0, 1, 11)]
        assert all(0.0 <= b <= 1.0 for b in betas)
        assert all(a >= b for a, b in zip(betas, betas[1:]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            fuse_targets(
                np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.int64), np.zeros((2, 2)), 0.5
            )


class TestOldPixelSet:
    def test_empty_when_no_old_labels(self):
        rt = fuse_targets(
            np.full((3, 3), 2, np.uint8), np.zeros((3, 3), np.int64), np.ones((3, 3)), 0.5
        )
        assert len(old_pixel_set(rt, [1])) == 0

    def test_full_grid_when_all_old(self):
        gt = np.zeros((4, 5), dtype=np.uint8)
        pseudo = np.ones((4, 5), dtype=np.int64)
        conf = np.ones((4, 5))
        rt = fuse_targets(gt, pseudo, conf, tau=0.5)
        pix = old_pixel_set(rt, [1])
        assert len(pix) == 20
        assert set(map(tuple, pix.coords)) == {(w, h) for h in range(4) for w in range(5)}

    def test_hand_2x2_coordinates(self):
        gt = np.array([[16, 0], [0, 255]], dtype=np.uint8)
        pseudo = np.array([[3, 5], [0, 2]], dtype=np.int64)
        conf = np.array([[0.9, 0.9], [0.9, 0.4]])
        rt = fuse_targets(gt, pseudo, conf, tau=0.5)
        pix = old_pixel_set(rt, old_classes=range(1, 16))
        # single class-5 pixel at (w=1, h=0)
        assert pix.coords.tolist() == [[1, 0]]

    def test_disjoint_from_new_class_pixels(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gt = rng.choice([0, 6, 255], size=(8, 8), p=[0.6, 0.25, 0.15]).astype(np.uint8)
            pseudo = rng.integers(0, 4, size=(8, 8))
            conf = rng.random((8, 8))
            rt = fuse_targets(gt, pseudo, conf, tau=0.3)
            pix = old_pixel_set(rt, [1, 2, 3])
            for w, h in pix.coords:
                assert gt[h, w] != 6

    def test_pixelset_helpers(self):
        mask = np.zeros((3, 4), dtype=bool)
        mask[1, 2] = True
        mask[2, 0] = True
        pix = PixelSet.from_mask(mask)
        assert len(pix) == 2
        assert pix.ws.tolist() == [2, 0]
        assert pix.hs.tolist() == [1, 2]
