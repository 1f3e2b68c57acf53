from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import ssim_brute_force
from osmosis.data.metrics import depth_abs_rel, psnr, ssim
from osmosis.errors import DataError


class TestPsnr:
    def test_identical_images_give_inf(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert psnr(img, img) == math.inf

    def test_known_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01 -> 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_against_reference_implementation(self, rng):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        a = rng.uniform(0, 1, (24, 24, 3))
        b = rng.uniform(0, 1, (24, 24, 3))
        ref = skimage_metrics.peak_signal_noise_ratio(a, b, data_range=1.0)
        assert psnr(a, b) == pytest.approx(ref, abs=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DataError):
            psnr(rng.uniform(0, 1, (4, 4)), rng.uniform(0, 1, (4, 5)))

    def test_range_violation(self):
        with pytest.raises(DataError):
            psnr(np.full((4, 4), 1.5), np.zeros((4, 4)))


class TestSsim:
    def test_identical_images_give_one(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_against_brute_force_windows(self, rng):
        a = rng.uniform(0, 1, (20, 18))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_brute_force(a, b), abs=1e-4)

    def test_multichannel_is_channel_mean(self, rng):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        per_channel = [ssim(a[..., c], b[..., c]) for c in range(3)]
        assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-12)

    def test_against_skimage(self, rng):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        a = rng.uniform(0, 1, (24, 24))
        b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
        ref = skimage_metrics.structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-4)

    def test_too_small_image_rejected(self, rng):
        with pytest.raises(DataError):
            ssim(rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8)))

    def test_lower_for_degraded_pair(self, rng):
        a = rng.uniform(0, 1, (32, 32))
        slightly = np.clip(a + rng.normal(0, 0.02, a.shape), 0, 1)
        badly = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
        assert ssim(a, badly) < ssim(a, slightly) <= 1.0


class TestDepthAbsRel:
    def test_exact_prediction_is_zero(self, rng):
        d = rng.uniform(0.2, 1.0, (8, 8))
        assert depth_abs_rel(d, d) == 0.0

    def test_hand_computed(self):
        gt = np.array([[1.0, 2.0]])
        pred = np.array([[1.5, 1.0]])
        assert depth_abs_rel(pred, gt) == pytest.approx((0.5 + 0.5) / 2)

    def test_mask_and_zero_gt_excluded(self):
        gt = np.array([[1.0, 0.0], [2.0, 4.0]])
        pred = np.array([[2.0, 99.0], [2.0, 4.0]])
        mask = np.array([[True, True], [False, True]])
        assert depth_abs_rel(pred, gt, mask) == pytest.approx((1.0 + 0.0) / 2)

    def test_all_invalid_raises(self):
        with pytest.raises(DataError):
            depth_abs_rel(np.ones((2, 2)), np.zeros((2, 2)))
