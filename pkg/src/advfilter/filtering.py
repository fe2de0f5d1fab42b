"""
Denoising operators.

- apply_additive: clamp(image + residual)
- apply_pixelwise_filter: every pixel/channel filtered by its own softmax-normalized
  K×K kernel, reflect padding at the borders, analytic backward pass
- uncertainty_map: per-pixel max over the raw 3K² kernel logits
- fuse: convex blend of two denoised images by a weight map
- FusionNet: six 3×3 convolutions + sigmoid turning two uncertainty maps into a weight map

Kernel fields are N×3K²×H×W tensors whose channel axis is ordered (channel, ky, kx).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from advfilter.errors import ShapeError


def _as_batch(t: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ShapeError(f"{name}: expected 3 or 4 dims, got {tuple(t.shape)}")


def kernel_size_of(kernels: torch.Tensor, channels: int = 3) -> int:
    """Recover K from a kernel field with channels·K² logit channels."""
    total = kernels.shape[-3]
    if total % channels:
        raise ShapeError(f"{total} kernel channels is not a multiple of {channels}")
    k = int(round((total // channels) ** 0.5))
    if k * k * channels != total:
        raise ShapeError(f"{total} kernel channels is not {channels}·K²")
    if k % 2 == 0:
        raise ShapeError(f"Kernel size must be odd, got K={k}")
    return k


def apply_additive(image: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Additive denoising: clamp(image + residual, 0, 1)."""
    if image.shape != residual.shape:
        raise ShapeError(f"Residual {tuple(residual.shape)} does not match image {tuple(image.shape)}")
    return torch.clamp(image + residual, 0.0, 1.0)


def _reflect_index(height: int, width: int, pad: int, device: torch.device) -> torch.Tensor:
    """Flat source index of every pixel in the reflect-padded grid."""
    idx = torch.arange(height * width, dtype=torch.float64, device=device).view(1, 1, height, width)
    return F.pad(idx, (pad, pad, pad, pad), mode="reflect").round().long().view(-1)


def _patches(image: torch.Tensor, k: int) -> torch.Tensor:
    """N×C×H×W -> N×C×K²×H×W neighbourhoods under reflect padding."""
    n, c, h, w = image.shape
    pad = k // 2
    padded = F.pad(image, (pad, pad, pad, pad), mode="reflect") if pad else image
    return F.unfold(padded, kernel_size=k).view(n, c, k * k, h, w)


def _filter_forward(image: torch.Tensor, logits: torch.Tensor, k: int) -> tuple[torch.Tensor, ...]:
    n, c, h, w = image.shape
    weights = torch.softmax(logits.view(n, c, k * k, h, w), dim=2)
    patches = _patches(image, k)
    return (weights * patches).sum(dim=2), weights, patches


def _filter_backward(
    image: torch.Tensor,
    weights: torch.Tensor,
    patches: torch.Tensor,
    upstream: torch.Tensor,
    k: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    n, c, h, w = image.shape
    pad = k // 2
    g = upstream.unsqueeze(2)

    # softmax VJP: w ⊙ (g_w − Σ w ⊙ g_w)
    grad_weights = g * patches
    grad_logits = weights * (grad_weights - (weights * grad_weights).sum(dim=2, keepdim=True))

    # neighbourhood-sum VJP: fold back onto the padded grid, then undo the reflection
    grad_patches = (g * weights).view(n, c * k * k, h * w)
    grad_padded = F.fold(grad_patches, output_size=(h + 2 * pad, w + 2 * pad), kernel_size=k)
    if pad:
        index = _reflect_index(h, w, pad, image.device)
        flat = grad_padded.reshape(n, c, -1)
        grad_image = torch.zeros(n, c, h * w, dtype=flat.dtype, device=flat.device)
        grad_image.scatter_add_(2, index.expand(n, c, -1), flat)
        grad_image = grad_image.view(n, c, h, w)
    else:
        grad_image = grad_padded
    return grad_image, grad_logits.reshape(n, c * k * k, h, w)


class PixelwiseFilter(torch.autograd.Function):
    """Per-pixel dynamic filtering with a hand-written vector-Jacobian product."""

    @staticmethod
    def forward(ctx, image: torch.Tensor, logits: torch.Tensor, k: int) -> torch.Tensor:
        output, weights, patches = _filter_forward(image, logits, k)
        ctx.save_for_backward(image, weights, patches)
        ctx.k = k
        return output

    @staticmethod
    def backward(ctx, upstream: torch.Tensor):
        image, weights, patches = ctx.saved_tensors
        grad_image, grad_logits = _filter_backward(image, weights, patches, upstream, ctx.k)
        return grad_image, grad_logits, None


def _check_filter_shapes(image: torch.Tensor, kernels: torch.Tensor) -> int:
    if image.shape[0] != kernels.shape[0] or image.shape[-2:] != kernels.shape[-2:]:
        raise ShapeError(
            f"Kernel field {tuple(kernels.shape)} does not match image {tuple(image.shape)}"
        )
    k = kernel_size_of(kernels, image.shape[1])
    if k // 2 >= min(image.shape[-2:]):
        raise ShapeError(f"K={k} too large for a {tuple(image.shape[-2:])} image")
    return k


def apply_pixelwise_filter(image: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """
    Filter every pixel with its own kernel.

    Args:
        image: 3×H×W or N×3×H×W in [0, 1].
        kernels: matching 3K²×H×W or N×3K²×H×W kernel logits.

    Returns:
        Filtered image; each output value is a convex combination of its
        K×K neighbourhood in the same channel, so it stays inside [0, 1].
    """
    x, squeeze = _as_batch(image, "image")
    logits, _ = _as_batch(kernels, "kernels")
    k = _check_filter_shapes(x, logits)
    out = PixelwiseFilter.apply(x, logits, k)
    return out.squeeze(0) if squeeze else out


def filter_gradient(
    image: torch.Tensor,
    kernels: torch.Tensor,
    upstream: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic (∂L/∂image, ∂L/∂kernel logits) of apply_pixelwise_filter given ∂L/∂output."""
    x, squeeze = _as_batch(image, "image")
    logits, _ = _as_batch(kernels, "kernels")
    g, _ = _as_batch(upstream, "upstream")
    k = _check_filter_shapes(x, logits)
    if g.shape != x.shape:
        raise ShapeError(f"Upstream {tuple(g.shape)} does not match image {tuple(x.shape)}")
    with torch.no_grad():
        _, weights, patches = _filter_forward(x, logits, k)
        grad_image, grad_logits = _filter_backward(x, weights, patches, g, k)
    if squeeze:
        return grad_image.squeeze(0), grad_logits.squeeze(0)
    return grad_image, grad_logits


def normalized_kernels(kernels: torch.Tensor, channels: int = 3) -> torch.Tensor:
    """Softmax-normalized kernels reshaped to (N,)C×K×K×H×W for inspection."""
    logits, squeeze = _as_batch(kernels, "kernels")
    k = kernel_size_of(logits, channels)
    n, _, h, w = logits.shape
    weights = torch.softmax(logits.view(n, channels, k * k, h, w), dim=2)
    weights = weights.view(n, channels, k, k, h, w)
    return weights.squeeze(0) if squeeze else weights


def uncertainty_map(kernels: torch.Tensor) -> torch.Tensor:
    """Per-pixel max over all 3K² raw logits: (N×)3K²×H×W -> (N×)H×W."""
    if kernels.dim() not in (3, 4):
        raise ShapeError(f"Kernel field must have 3 or 4 dims, got {tuple(kernels.shape)}")
    return kernels.amax(dim=-3)


def fuse(i_sl: torch.Tensor, i_m: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """weight ⊙ i_sl + (1 − weight) ⊙ i_m, with the weight map broadcast over channels."""
    if i_sl.shape != i_m.shape:
        raise ShapeError(f"Branch outputs differ: {tuple(i_sl.shape)} vs {tuple(i_m.shape)}")
    if weight.shape != i_sl.shape[:-3] + i_sl.shape[-2:]:
        raise ShapeError(
            f"Weight map {tuple(weight.shape)} does not match images {tuple(i_sl.shape)}"
        )
    return torch.lerp(i_m, i_sl, weight.unsqueeze(-3))


class FusionNet(nn.Module):
    """C(·): two uncertainty maps -> weight map in (0, 1)."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        plan = (2,) + (hidden,) * 5 + (1,)
        layers: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:])):
            layers.append(nn.Conv2d(cin, cout, kernel_size=3, padding=1))
            if i < len(plan) - 2:
                layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)
        for module in self.body:
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def forward(self, u_sl: torch.Tensor, u_m: torch.Tensor) -> torch.Tensor:
        if u_sl.shape != u_m.shape:
            raise ShapeError(f"Uncertainty maps differ: {tuple(u_sl.shape)} vs {tuple(u_m.shape)}")
        x = torch.stack([u_sl, u_m], dim=-3)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        w = torch.sigmoid(self.body(x)).squeeze(-3)
        return w.squeeze(0) if squeeze else w


def fusion_net_forward(net: FusionNet, u_sl: torch.Tensor, u_m: torch.Tensor) -> torch.Tensor:
    """Weight map W = sigmoid(C([U_sl, U_m]))."""
    return net(u_sl, u_m)
