"""Tests for pixel-wise filtering, uncertainty maps and fusion."""

import numpy as np
import pytest
import torch

from advfilter.acceptance import brute_force_filter, finite_difference_error
from advfilter.errors import ShapeError
from advfilter.filtering import (
    FusionNet,
    apply_additive,
    apply_pixelwise_filter,
    filter_gradient,
    fuse,
    fusion_net_forward,
    kernel_size_of,
    normalized_kernels,
    uncertainty_map,
)


def _identity_logits(k: int, h: int, w: int, strength: float = 60.0) -> torch.Tensor:
    logits = torch.zeros(3 * k * k, h, w, dtype=torch.float64)
    center = (k // 2) * k + k // 2
    for c in range(3):
        logits[c * k * k + center] = strength
    return logits


class TestPixelwiseFilter:
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_scalar_oracle(self, k):
        rng = np.random.default_rng(k)
        for _ in range(10):
            image = rng.random((3, 6, 7))
            logits = rng.normal(scale=2.0, size=(3 * k * k, 6, 7))
            got = apply_pixelwise_filter(torch.from_numpy(image), torch.from_numpy(logits)).numpy()
            np.testing.assert_allclose(got, brute_force_filter(image, logits), atol=1e-6)

    def test_identity_kernel_returns_input(self):
        image = torch.rand(3, 8, 8, dtype=torch.float64)
        out = apply_pixelwise_filter(image, _identity_logits(5, 8, 8))
        assert torch.allclose(out, image, atol=1e-6)

    def test_uniform_logits_average_the_neighbourhood(self):
        image = torch.rand(3, 8, 8, dtype=torch.float64)
        out = apply_pixelwise_filter(image, torch.zeros(27, 8, 8, dtype=torch.float64))
        expected = image[:, 2:5, 3:6].mean(dim=(1, 2))
        assert torch.allclose(out[:, 3, 4], expected)

    def test_output_stays_in_unit_range(self):
        image = torch.rand(2, 3, 8, 8)
        out = apply_pixelwise_filter(image, 10 * torch.randn(2, 75, 8, 8))
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6

    def test_batched_and_single_agree(self):
        image = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        logits = torch.randn(2, 27, 8, 8, dtype=torch.float64)
        batched = apply_pixelwise_filter(image, logits)
        assert torch.allclose(batched[1], apply_pixelwise_filter(image[1], logits[1]))

    def test_mismatched_shapes_raise(self):
        with pytest.raises(ShapeError):
            apply_pixelwise_filter(torch.rand(3, 8, 8), torch.randn(27, 8, 7))
        with pytest.raises(ShapeError):
            apply_pixelwise_filter(torch.rand(3, 8, 8), torch.randn(26, 8, 8))

    def test_kernel_larger_than_image_raises(self):
        with pytest.raises(ShapeError):
            apply_pixelwise_filter(torch.rand(3, 2, 2), torch.randn(75, 2, 2))


class TestFilterGradient:
    def test_gradcheck(self):
        image = torch.rand(1, 3, 5, 5, dtype=torch.float64, requires_grad=True)
        logits = torch.randn(1, 27, 5, 5, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(apply_pixelwise_filter, (image, logits))

    @pytest.mark.parametrize("k", [3, 5])
    def test_finite_differences(self, k):
        gen = torch.Generator().manual_seed(k)
        for _ in range(3):
            image = torch.rand(3, 4, 4, dtype=torch.float64, generator=gen)
            logits = torch.randn(3 * k * k, 4, 4, dtype=torch.float64, generator=gen)
            assert finite_difference_error(image, logits) <= 1e-5

    def test_matches_autograd(self):
        image = torch.rand(2, 3, 6, 6, dtype=torch.float64, requires_grad=True)
        logits = torch.randn(2, 27, 6, 6, dtype=torch.float64, requires_grad=True)
        upstream = torch.randn(2, 3, 6, 6, dtype=torch.float64)
        apply_pixelwise_filter(image, logits).backward(upstream)
        grad_x, grad_phi = filter_gradient(image.detach(), logits.detach(), upstream)
        assert torch.allclose(grad_x, image.grad)
        assert torch.allclose(grad_phi, logits.grad)


class TestKernels:
    def test_kernel_size_of(self):
        assert kernel_size_of(torch.zeros(75, 4, 4)) == 5
        with pytest.raises(ShapeError):
            kernel_size_of(torch.zeros(12, 4, 4))

    def test_normalized_kernels_sum_to_one(self):
        kernels = normalized_kernels(torch.randn(27, 4, 4))
        assert kernels.shape == (3, 3, 3, 4, 4)
        assert torch.allclose(kernels.sum(dim=(1, 2)), torch.ones(3, 4, 4))

    def test_uncertainty_is_max_over_raw_logits(self):
        logits = torch.randn(2, 75, 4, 4)
        logits[1, 40, 2, 3] = 99.0
        u = uncertainty_map(logits)
        assert u.shape == (2, 4, 4)
        assert u[1, 2, 3] == 99.0
        assert torch.equal(u[0], logits[0].max(dim=0).values)

    def test_uncertainty_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            uncertainty_map(torch.zeros(4, 4))


class TestFusion:
    def test_weight_endpoints_select_a_branch(self):
        a, b = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
        assert torch.allclose(fuse(a, b, torch.ones(4, 4)), a)
        assert torch.allclose(fuse(a, b, torch.zeros(4, 4)), b)

    def test_convex_combination(self):
        a, b = torch.rand(2, 3, 4, 4, dtype=torch.float64), torch.rand(2, 3, 4, 4, dtype=torch.float64)
        w = torch.rand(2, 4, 4, dtype=torch.float64)
        expected = w.unsqueeze(1) * a + (1 - w.unsqueeze(1)) * b
        assert torch.allclose(fuse(a, b, w), expected)

    def test_weight_shape_checked(self):
        with pytest.raises(ShapeError):
            fuse(torch.rand(3, 4, 4), torch.rand(3, 4, 4), torch.rand(3, 4, 4))

    def test_fusion_net_outputs_weights(self):
        net = FusionNet()
        w = fusion_net_forward(net, torch.randn(2, 8, 8), torch.randn(2, 8, 8))
        assert w.shape == (2, 8, 8)
        assert (w >= 0).all() and (w <= 1).all()
        assert net(torch.randn(8, 8), torch.randn(8, 8)).shape == (8, 8)


def test_additive_clamps():
    image = torch.full((3, 4, 4), 0.9)
    out = apply_additive(image, torch.full((3, 4, 4), 0.5))
    assert out.max() == 1.0
