"""Metric tests with reference oracles; harness sanity via a planted bad gradient."""

from __future__ import annotations

import math

import pytest
import torch

from mvdiff.evaluation import (
    component_grad_check,
    grad_check,
    masked_psnr,
    masked_ssim,
    reprojection_consistency,
)
from mvdiff.rng import make_generator
from mvdiff.synthdata import build_scene, make_scene_spec


def ssim_reference(pred, target, mask, win=7, k1=0.01, k2=0.03):
    """Literal per-window SSIM loop, averaged over masked full-window centers."""
    c1, c2 = k1 * k1, k2 * k2
    c, h, w = pred.shape
    half = win // 2
    values = []
    for r in range(half, h - half):
        for col in range(half, w - half):
            if not mask[r, col]:
                continue
            for ch in range(c):
                p = pred[ch, r - half : r + half + 1, col - half : col + half + 1].double()
                t = target[ch, r - half : r + half + 1, col - half : col + half + 1].double()
                mp, mt = p.mean(), t.mean()
                vp = (p * p).mean() - mp * mp
                vt = (t * t).mean() - mt * mt
                cov = (p * t).mean() - mp * mt
                values.append(
                    float(
                        ((2 * mp * mt + c1) * (2 * cov + c2))
                        / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
                    )
                )
    return sum(values) / len(values)


class TestMaskedPsnr:
    def test_identical_capped(self):
        img = torch.rand(3, 8, 8, generator=make_generator(0))
        mask = torch.ones(8, 8, dtype=torch.bool)
        assert masked_psnr(img, img, mask) == 99.0

    def test_uniform_error_twenty_db(self):
        target = torch.zeros(3, 8, 8, dtype=torch.float64)
        pred = torch.full((3, 8, 8), 0.1, dtype=torch.float64)
        mask = torch.ones(8, 8, dtype=torch.bool)
        assert masked_psnr(pred, target, mask) == pytest.approx(20.0, abs=1e-9)

    def test_mask_excludes_errors(self):
        target = torch.zeros(3, 4, 4)
        pred = torch.zeros(3, 4, 4)
        pred[:, 0, 0] = 1.0
        mask = torch.ones(4, 4, dtype=torch.bool)
        mask[0, 0] = False
        assert masked_psnr(pred, target, mask) == 99.0

    def test_symmetric(self):
        gen = make_generator(1)
        a = torch.rand(3, 6, 6, generator=gen)
        b = torch.rand(3, 6, 6, generator=gen)
        mask = torch.rand(6, 6, generator=gen) > 0.4
        assert masked_psnr(a, b, mask) == pytest.approx(masked_psnr(b, a, mask))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), torch.zeros(4, 4, dtype=torch.bool))


class TestMaskedSsim:
    def test_identical_is_one(self):
        img = torch.rand(3, 12, 12, generator=make_generator(2))
        mask = torch.ones(12, 12, dtype=torch.bool)
        assert masked_ssim(img, img, mask) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_one_regardless_of_level(self):
        for level in (0.0, 0.3, 1.0):
            img = torch.full((3, 10, 10), level)
            mask = torch.ones(10, 10, dtype=torch.bool)
            assert masked_ssim(img, img, mask) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_against_reference(self):
        gen = make_generator(3)
        target = (torch.rand(1, 12, 12, generator=gen) > 0.5).float()
        pred = 1.0 - target
        mask = torch.ones(12, 12, dtype=torch.bool)
        got = masked_ssim(pred, target, mask)
        ref = ssim_reference(pred, target, mask)
        assert got == pytest.approx(ref, abs=1e-9)

    def test_masked_centers_only(self):
        gen = make_generator(4)
        a = torch.rand(1, 12, 12, generator=gen)
        b = a.clone()
        b[:, 9:, 9:] = 1.0 - b[:, 9:, 9:]  # damage outside the masked window centers
        mask = torch.zeros(12, 12, dtype=torch.bool)
        mask[4:6, 4:6] = True
        # windows centered in [4,6) never reach the damaged corner at 9+
        assert masked_ssim(a, b, mask) == pytest.approx(1.0, abs=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_ssim(torch.zeros(1, 8, 8), torch.zeros(1, 8, 8), torch.zeros(8, 8, dtype=torch.bool))


class TestReprojectionConsistency:
    def scene(self):
        return build_scene(make_scene_spec(4, 11), image_size=32, n_poses=8)

    def test_ground_truth_renders_consistent(self):
        s = self.scene()
        idx = [0, 1, 2]
        err = reprojection_consistency(
            s.images[idx], [s.views[i] for i in idx], s.depths[idx], s.masks[idx]
        )
        assert err < 0.1

    def test_identical_pose_equals_direct_difference(self):
        s = self.scene()
        gen = make_generator(5)
        other = (s.images[0] + 0.1 * torch.randn(s.images[0].shape, generator=gen)).clamp(0, 1)
        images = torch.stack([s.images[0], other])
        views = [s.views[0], s.views[0]]
        depths = torch.stack([s.depths[0], s.depths[0]])
        masks = torch.stack([s.masks[0], s.masks[0]])
        err = reprojection_consistency(images, views, depths, masks)
        direct = (s.images[0] - other).abs()[:, s.masks[0]].mean(dim=0).mean()
        assert err == pytest.approx(float(direct), abs=1e-6)

    def test_scrambling_increases_error(self):
        s = self.scene()
        idx = [0, 1]
        base = reprojection_consistency(
            s.images[idx], [s.views[i] for i in idx], s.depths[idx], s.masks[idx]
        )
        gen = make_generator(6)
        scrambled = s.images[idx].clone()
        flat = scrambled[1].reshape(3, -1)
        perm = torch.randperm(flat.shape[1], generator=gen)
        scrambled[1] = flat[:, perm].reshape(scrambled[1].shape)
        worse = reprojection_consistency(
            scrambled, [s.views[i] for i in idx], s.depths[idx], s.masks[idx]
        )
        assert worse > base

    def test_reindexing_invariance(self):
        s = self.scene()
        idx = [0, 2, 4]
        err = reprojection_consistency(
            s.images[idx], [s.views[i] for i in idx], s.depths[idx], s.masks[idx]
        )
        rdx = [4, 0, 2]
        err2 = reprojection_consistency(
            s.images[rdx], [s.views[i] for i in rdx], s.depths[rdx], s.masks[rdx]
        )
        assert err == pytest.approx(err2, abs=1e-9)

    def test_no_correspondences_rejected(self):
        s = self.scene()
        masks = torch.zeros_like(s.masks[:2])
        with pytest.raises(ValueError):
            reprojection_consistency(s.images[:2], s.views[:2], s.depths[:2], masks)


class TestGradCheckHarness:
    def test_linear_component_nearly_exact(self):
        report = component_grad_check("linear")
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_quadratic_exhaustive(self):
        x = torch.randn(5, dtype=torch.float64, requires_grad=True)

        def fn():
            return (x**3).sum()

        err, probes = grad_check(fn, [x])
        assert probes == 5
        assert err < 1e-6  # central differences carry ~1e-8 cancellation noise

    def test_detects_wrong_gradient(self):
        class BadScale(torch.autograd.Function):
            @staticmethod
            def forward(ctx, inp):
                return 2.0 * inp

            @staticmethod
            def backward(ctx, grad):
                return 3.0 * grad  # deliberately wrong (forward says 2.0)

        x = torch.randn(4, dtype=torch.float64, requires_grad=True)

        def fn():
            return BadScale.apply(x).sum()

        err, _ = grad_check(fn, [x])
        assert err > 0.1

    def test_directional_mode(self):
        x = torch.randn(6, dtype=torch.float64, requires_grad=True)
        w = torch.randn(6, dtype=torch.float64, requires_grad=True)

        def fn():
            return (torch.sigmoid(x) * w).sum()

        err, probes = grad_check(fn, [x, w], n_directions=8)
        assert probes == 8
        assert err < 1e-7

    def test_unknown_component_rejected(self):
        with pytest.raises(ValueError):
            component_grad_check("nonexistent")
