"""Tests for the training objectives."""

import numpy as np
import pytest
import torch

from advfilter.errors import ConfigError, ShapeError
from advfilter.filtering import filter_gradient
from advfilter.losses import LossSpec, compute_loss, fusion_ce, loss_image, loss_semantic


class TestImageLoss:
    def test_identical_images(self):
        x = torch.rand(2, 3, 8, 8)
        assert loss_image(x, x).item() == 0.0

    def test_full_range_gap(self):
        assert loss_image(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4)).item() == 1.0

    def test_matches_elementwise_loop(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(2, 3, 5, 5, generator=gen, dtype=torch.float64)
        b = torch.rand(2, 3, 5, 5, generator=gen, dtype=torch.float64)
        flat_a, flat_b = a.numpy().ravel(), b.numpy().ravel()
        expected = sum(abs(float(u) - float(v)) for u, v in zip(flat_a, flat_b)) / flat_a.size
        assert loss_image(a, b).item() == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_image(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 5, 5))


class TestSemanticLoss:
    def test_zero_on_identical_images(self, threat):
        x = torch.rand(2, 3, 16, 16)
        assert loss_semantic(threat, x, x, "layer1").item() == 0.0

    def test_non_negative_and_differentiable(self, threat):
        clean = torch.rand(2, 3, 16, 16)
        denoised = torch.rand(2, 3, 16, 16, requires_grad=True)
        loss = loss_semantic(threat, clean, denoised, "layer2")
        loss.backward()
        assert loss.item() >= 0.0
        assert denoised.grad is not None and torch.isfinite(denoised.grad).all()

    def test_dispatch_requires_threat(self):
        x = torch.rand(1, 3, 16, 16)
        with pytest.raises(ConfigError):
            compute_loss(LossSpec("semantic_l1", probe_layer="layer1"), x, x)


def test_fusion_targets(threat):
    clean = torch.rand(4, 3, 16, 16)
    fused = torch.rand(4, 3, 16, 16)
    hard = fusion_ce(threat, clean, fused, "hard")
    soft = fusion_ce(threat, clean, fused, "soft")
    assert torch.isfinite(hard) and torch.isfinite(soft)
    assert compute_loss(LossSpec("fusion_ce"), clean, fused, threat).item() == pytest.approx(hard.item())


@pytest.mark.parametrize(
    "kwargs",
    [{"kind": "mse"}, {"kind": "semantic_l1"}, {"kind": "fusion_ce", "target": "median"}],
)
def test_invalid_loss_specs(kwargs):
    with pytest.raises(ConfigError):
        LossSpec(**kwargs)


def test_zero_upstream_gives_zero_gradients():
    image = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    logits = torch.randn(1, 27, 6, 6, dtype=torch.float64)
    d_image, d_logits = filter_gradient(image, logits, torch.zeros_like(image))
    assert np.count_nonzero(d_image.numpy()) == 0
    assert np.count_nonzero(d_logits.numpy()) == 0
