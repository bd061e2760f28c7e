"""Loss function tests: SSIM, photometric, minimum reprojection with
auto-masking, sparse depth, smoothness, and the weighted total."""

import numpy as np
import pytest

from dcomp import losses as LS
from dcomp import tensor as T
from dcomp.errors import NumericalError, ShapeError
from dcomp.tensor import Tensor


def constant_image_ssim(a, b):
    """Hand evaluation of the SSIM formula with zero variance: the C2
    factors cancel, leaving the luminance term (2ab+C1)/(a^2+b^2+C1)."""
    c1 = 0.01**2
    return (2 * a * b + c1) / (a * a + b * b + c1)


class TestSsim:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        img = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        out = LS.ssim_map(img, img)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-9)

    def test_constant_images_luminance_only(self):
        a, b = 0.2, 0.4
        i1 = Tensor(np.full((1, 1, 5, 5), a))
        i2 = Tensor(np.full((1, 1, 5, 5), b))
        want = constant_image_ssim(a, b)
        np.testing.assert_allclose(LS.ssim_map(i1, i2).data, want, rtol=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        i1 = Tensor(rng.uniform(size=(1, 3, 5, 7)))
        i2 = Tensor(rng.uniform(size=(1, 3, 5, 7)))
        a = LS.ssim_map(i1, i2).data
        b = LS.ssim_map(i2, i1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(2)
        i1 = Tensor(rng.uniform(size=(2, 3, 8, 8)))
        i2 = Tensor(rng.uniform(size=(2, 3, 8, 8)))
        out = LS.ssim_map(i1, i2).data
        assert out.min() >= -1.0 - 1e-9 and out.max() <= 1.0 + 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            LS.ssim_map(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


class TestPhotometricLoss:
    def test_identical_images_zero(self):
        rng = np.random.default_rng(3)
        img = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        out = LS.photometric_loss(img, img, alpha=0.85)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)
        assert (out.data >= -1e-12).all()

    def test_alpha_zero_is_pure_l1(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(1, 3, 5, 5))
        b = rng.uniform(size=(1, 3, 5, 5))
        out = LS.photometric_loss(Tensor(a), Tensor(b), alpha=0.0)
        want = np.abs(a - b).mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_constant_images_hand_value(self):
        # Composition of the constant-SSIM oracle and the L1 term.
        a, b, alpha = 0.2, 0.4, 0.85
        i1 = Tensor(np.full((1, 3, 5, 5), a))
        i2 = Tensor(np.full((1, 3, 5, 5), b))
        want = alpha * (1 - constant_image_ssim(a, b)) / 2 + (1 - alpha) * abs(a - b)
        out = LS.photometric_loss(i1, i2, alpha=alpha)
        np.testing.assert_allclose(out.data, want, rtol=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = Tensor(rng.uniform(size=(1, 3, 6, 6)))
            b = Tensor(rng.uniform(size=(1, 3, 6, 6)))
            assert LS.photometric_loss(a, b).data.min() >= -1e-12


class TestMinReprojection:
    def test_static_scene_fully_masked(self):
        # Sources identical to the target: unwarped loss is 0, warped can
        # never beat it strictly, so everything is auto-masked out.
        rng = np.random.default_rng(6)
        img = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        warped = [(img, np.ones((1, 1, 6, 6), dtype=bool))]
        res = LS.min_reprojection(img, warped, [img])
        assert res.empty and res.coverage == 0.0
        assert res.loss.item() == 0.0

    def test_correct_warp_beats_moving_texture(self):
        rng = np.random.default_rng(7)
        target = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
        # Source differs strongly (moving texture); the warped view matches.
        source = Tensor(np.clip(target.data + rng.normal(0, 0.3, target.shape), 0, 1))
        warped = [(target, np.ones((1, 1, 8, 8), dtype=bool))]
        res = LS.min_reprojection(target, warped, [source])
        assert res.coverage > 0.9
        assert res.loss.item() < 1e-9

    def test_per_pixel_min_picks_smaller(self):
        # Two sources, per-pixel losses ~0.5 and ~0.01: the min picks 0.01.
        target = Tensor(np.full((1, 3, 6, 6), 0.5))
        bad = Tensor(np.full((1, 3, 6, 6), 0.0))  # L1 = 0.5
        near = Tensor(np.full((1, 3, 6, 6), 0.49))  # L1 = 0.01
        valid = np.ones((1, 1, 6, 6), dtype=bool)
        far_sources = [Tensor(np.full((1, 3, 6, 6), 1.0))] * 2
        res = LS.min_reprojection(target, [(bad, valid), (near, valid)], far_sources, alpha=0.0)
        np.testing.assert_allclose(res.loss.item(), 0.01, atol=1e-9)

    def test_invalid_pixels_excluded(self):
        target = Tensor(np.full((1, 3, 4, 4), 0.5))
        synth = Tensor(np.full((1, 3, 4, 4), 0.4))
        valid = np.zeros((1, 1, 4, 4), dtype=bool)
        valid[0, 0, :2] = True
        source = Tensor(np.full((1, 3, 4, 4), 1.0))
        res = LS.min_reprojection(target, [(synth, valid)], [source], alpha=0.0)
        # Only the valid half contributes; loss is the plain L1 there.
        np.testing.assert_allclose(res.loss.item(), 0.1, atol=1e-9)
        assert res.automask[0, 0, 2:].sum() == 0

    def test_zero_sources_rejected(self):
        with pytest.raises(NumericalError):
            LS.min_reprojection(Tensor(np.zeros((1, 3, 4, 4))), [], [])

    def test_singleton_source_equals_masked_photometric(self):
        rng = np.random.default_rng(8)
        target = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        synth = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        source = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        valid = np.ones((1, 1, 6, 6), dtype=bool)
        res = LS.min_reprojection(target, [(synth, valid)], [source])
        per_pixel = LS.photometric_loss(target, synth)
        want = (per_pixel.data * res.automask).sum() / max(res.automask.sum(), 1)
        np.testing.assert_allclose(res.loss.item(), want, rtol=1e-9)

    def test_gradient_flows_through_min(self):
        rng = np.random.default_rng(9)
        base = rng.uniform(0.3, 0.7, size=(1, 3, 6, 6))
        target = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        source = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        valid = np.ones((1, 1, 6, 6), dtype=bool)

        def f(t):
            res = LS.min_reprojection(target, [(t, valid)], [source], alpha=0.85)
            return res.loss

        err = T.finite_difference_check(f, Tensor(base, dtype=np.float64))
        assert err < 1e-5


class TestSparseDepthLoss:
    def test_exact_prediction_zero(self):
        depth = np.full((1, 1, 4, 4), 2.0)
        valid = np.zeros((1, 1, 4, 4), dtype=bool)
        valid[0, 0, 1, 1] = True
        out = LS.sparse_depth_loss(Tensor(depth), depth, valid)
        assert out.item() == 0.0

    def test_hand_mean(self):
        # Errors of 1 m and 3 m over two observed pixels -> mean 2.0.
        pred = np.full((1, 1, 2, 2), 5.0)
        sparse = np.zeros((1, 1, 2, 2))
        sparse[0, 0, 0, 0] = 4.0
        sparse[0, 0, 1, 1] = 2.0
        valid = sparse > 0
        out = LS.sparse_depth_loss(Tensor(pred), sparse, valid)
        assert out.item() == 2.0

    def test_empty_omega_gives_zero(self):
        pred = Tensor(np.ones((1, 1, 3, 3)))
        out = LS.sparse_depth_loss(pred, np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3), dtype=bool))
        assert out.item() == 0.0

    def test_invariant_to_values_outside_omega(self):
        rng = np.random.default_rng(10)
        sparse = np.zeros((1, 1, 4, 4))
        sparse[0, 0, 0, 0] = 3.0
        valid = sparse > 0
        p1 = rng.uniform(1, 5, size=(1, 1, 4, 4))
        p2 = p1.copy()
        p2[0, 0, 1:, :] = 99.0  # only unobserved pixels changed
        a = LS.sparse_depth_loss(Tensor(p1), sparse, valid).item()
        b = LS.sparse_depth_loss(Tensor(p2), sparse, valid).item()
        assert a == b


class TestSmoothnessLoss:
    def test_constant_inverse_depth_zero(self):
        rng = np.random.default_rng(11)
        inv = Tensor(np.full((1, 1, 5, 5), 0.3))
        img = Tensor(rng.uniform(size=(1, 3, 5, 5)))
        assert LS.smoothness_loss(inv, img).item() == 0.0

    def test_ramp_hand_value(self):
        # 1x4 ramp [1,2,3,4], constant image: loss = |slope| / mean = 1/2.5.
        inv = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
        img = Tensor(np.full((1, 3, 1, 4), 0.5))
        np.testing.assert_allclose(LS.smoothness_loss(inv, img).item(), 1.0 / 2.5, rtol=1e-12)

    def test_image_edge_reduces_penalty(self):
        inv = np.ones((1, 1, 4, 4))
        inv[:, :, :, 2:] = 2.0  # depth edge at column boundary
        flat = Tensor(np.full((1, 3, 4, 4), 0.5))
        edge_img = np.full((1, 3, 4, 4), 0.5)
        edge_img[:, :, :, 2:] = 1.0  # image edge co-located with depth edge
        loss_flat = LS.smoothness_loss(Tensor(inv), flat).item()
        loss_edge = LS.smoothness_loss(Tensor(inv), Tensor(edge_img)).item()
        assert loss_edge < loss_flat

    @pytest.mark.parametrize("scale", [0.5, 2.0, 10.0])
    def test_scale_invariance(self, scale):
        rng = np.random.default_rng(12)
        inv = rng.uniform(0.2, 0.8, size=(1, 1, 6, 6))
        img = Tensor(rng.uniform(size=(1, 3, 6, 6)))
        base = LS.smoothness_loss(Tensor(inv), img).item()
        scaled = LS.smoothness_loss(Tensor(inv * scale), img).item()
        assert abs(scaled - base) / base < 1e-6

    def test_nonpositive_mean_rejected(self):
        with pytest.raises(NumericalError):
            LS.smoothness_loss(Tensor(np.full((1, 1, 3, 3), -1.0)), Tensor(np.zeros((1, 3, 3, 3))))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(13)
        inv = rng.uniform(0.2, 0.9, size=(1, 1, 5, 5))
        img = Tensor(rng.uniform(size=(1, 3, 5, 5)))
        err = T.finite_difference_check(
            lambda t: LS.smoothness_loss(t, img), Tensor(inv, dtype=np.float64)
        )
        assert err < 1e-6


class TestTotalLoss:
    def test_all_zero(self):
        zero = Tensor(np.zeros(()))
        total, report = LS.total_loss(zero, zero, zero, LS.LossWeights())
        assert total.item() == 0.0 and report.total == 0.0

    def test_paper_weights_arithmetic(self):
        # photo=0.1, depth=2.0, smooth=0.05 with paper weights:
        # 0.1 + 0.001*2.0 + 0.1*0.05 = 0.107
        total, report = LS.total_loss(
            Tensor(np.array(0.1)),
            Tensor(np.array(2.0)),
            Tensor(np.array(0.05)),
            LS.LossWeights(alpha=0.85, lambda_d=0.001, lambda_s=0.1),
        )
        np.testing.assert_allclose(total.item(), 0.107, rtol=1e-12)
        np.testing.assert_allclose(
            report.total,
            report.photo + 0.001 * report.depth + 0.1 * report.smooth,
            rtol=1e-6,
        )

    def test_gradient_isolation_with_zeroed_weights(self):
        # Only lambda_d nonzero: gradients flow through the depth branch only.
        photo_in = Tensor(np.array([0.2]), requires_grad=True)
        depth_in = Tensor(np.array([1.0]), requires_grad=True)
        smooth_in = Tensor(np.array([0.4]), requires_grad=True)
        weights = LS.LossWeights(alpha=0.85, lambda_d=0.5, lambda_s=0.0)
        total, _ = LS.total_loss(
            T.mul(photo_in, 0.0), T.mul(depth_in, 2.0), T.mul(smooth_in, 1.0), weights
        )
        T.backward(total)
        assert np.linalg.norm(depth_in.grad) > 0
        assert np.linalg.norm(smooth_in.grad) == 0

    def test_invalid_weights_rejected(self):
        with pytest.raises(NumericalError):
            LS.LossWeights(alpha=1.5)
        with pytest.raises(NumericalError):
            LS.LossWeights(lambda_d=-0.1)
