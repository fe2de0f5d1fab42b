"""
U-Net denoisers.

Eight blocks of three 3×3 conv + ReLU layers. Blocks 1-4 downsample with a
stride-2 final conv (factor 16 overall), block 5 is the bottleneck, blocks
6-8 upsample (nearest + conv) and concatenate the pre-downsample features of
blocks 4, 3 and 2. The decoder ends at half resolution; each output head
upsamples once more and sees the input image before predicting either a
residual (additive) or per-pixel kernel logits (filtering).
"""

from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from advfilter.errors import ShapeError
from advfilter.filtering import apply_additive, apply_pixelwise_filter
from advfilter.models.base import (
    BackboneConfig,
    Denoiser,
    HeadConfig,
    check_input,
    init_conv,
    pad_to_multiple,
)

logger = logging.getLogger(__name__)

HEAD_WEIGHT_SCALE = 0.1


class ConvBlock(nn.Module):
    """Three 3×3 conv + ReLU layers; optionally the last one has stride 2."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 3, padding=1,
                               stride=2 if downsample else 1)
        self.downsample = downsample

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (features before the last conv, block output)."""
        h = F.relu(self.conv1(x))
        pre = F.relu(self.conv2(h))
        return pre, F.relu(self.conv3(pre))


class Encoder(nn.Module):
    """Blocks 1-5."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        channels = config.encoder_channels
        ins = (config.in_channels,) + channels[:-1]
        self.blocks = nn.ModuleList(
            ConvBlock(cin, cout, downsample=i < 4) for i, (cin, cout) in enumerate(zip(ins, channels))
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        skips: dict[int, torch.Tensor] = {}
        for index, block in enumerate(self.blocks, start=1):
            pre, x = block(x)
            if index in (2, 3, 4):
                skips[index] = pre
        return x, skips


class Decoder(nn.Module):
    """Blocks 6-8: upsample, concatenate the skip of block 4/3/2, three convs."""

    SKIP_SOURCES = (4, 3, 2)

    def __init__(self, config: BackboneConfig):
        super().__init__()
        enc = config.encoder_channels
        blocks = []
        cin = enc[4]
        for source in self.SKIP_SOURCES:
            skip_ch = enc[source - 1]
            blocks.append(ConvBlock(cin + skip_ch, skip_ch))
            cin = skip_ch
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cin

    def forward(self, x: torch.Tensor, skips: dict[int, torch.Tensor]) -> torch.Tensor:
        for source, block in zip(self.SKIP_SOURCES, self.blocks):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            _, x = block(torch.cat([x, skips[source]], dim=1))
        return x


class OutputHead(nn.Module):
    """Final layer behind the eight blocks: ×2 upsample, input concat, conv, 1×1 projection."""

    def __init__(self, in_channels: int, config: HeadConfig):
        super().__init__()
        self.config = config
        self.conv = nn.Conv2d(in_channels + 3, in_channels, 3, padding=1)
        self.proj = nn.Conv2d(in_channels, config.output_channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        init_conv(self)
        with torch.no_grad():
            self.proj.weight.mul_(HEAD_WEIGHT_SCALE)
            if self.config.kind == "filtering":
                k = self.config.filter_size
                center = (k // 2) * k + k // 2
                for c in range(3):
                    self.proj.bias[c * k * k + center] = self.config.identity_logit

    def forward(self, features: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(features, scale_factor=2, mode="nearest")
        x = F.relu(self.conv(torch.cat([x, image], dim=1)))
        return self.proj(x)


class UNetDenoiser(Denoiser):
    """Shared encoder/decoder body for the single-output U-Net denoisers."""

    def __init__(self, backbone: BackboneConfig, head: HeadConfig):
        super().__init__(backbone, head)
        self.encoder = Encoder(backbone)
        self.decoder = Decoder(backbone)
        init_conv(self.encoder)
        init_conv(self.decoder)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        bottleneck, skips = self.encoder(x)
        return self.decoder(bottleneck, skips)


class AdditiveDenoiser(UNetDenoiser):
    """u_add: predicts the inverse perturbation and adds it to the input."""

    arch = "u_add"

    def __init__(self, backbone: BackboneConfig, head: HeadConfig | None = None):
        head = head or HeadConfig(kind="additive")
        if head.kind != "additive":
            raise ShapeError("u_add needs an additive head")
        super().__init__(backbone, head)
        self.head = OutputHead(self.decoder.out_channels, head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input(x)
        return self.head(self.features(x), x)

    def denoise_batch(self, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        return apply_additive(x, self(x))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "head": list(self.head.parameters()),
        }


class FilteringDenoiser(UNetDenoiser):
    """u_filt: predicts a K×K kernel per pixel and channel."""

    arch = "u_filt"

    def __init__(self, backbone: BackboneConfig, head: HeadConfig | None = None):
        head = head or HeadConfig(kind="filtering")
        if head.kind != "filtering":
            raise ShapeError("u_filt needs a filtering head")
        super().__init__(backbone, head)
        self.head = OutputHead(self.decoder.out_channels, head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input(x)
        return self.head(self.features(x), x)

    def denoise_batch(self, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        return apply_pixelwise_filter(x, self(x))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "head": list(self.head.parameters()),
        }


class MultiHeadDenoiser(UNetDenoiser):
    """u_multihead: one U-Net body, four filtering heads (head_1 .. head_4)."""

    arch = "u_multihead"
    num_heads = 4
    variants = ("head_1", "head_2", "head_3", "head_4")

    def __init__(self, backbone: BackboneConfig, head: HeadConfig | None = None):
        head = head or HeadConfig(kind="filtering")
        if head.kind != "filtering":
            raise ShapeError("u_multihead needs filtering heads")
        super().__init__(backbone, head)
        self.heads = nn.ModuleList(
            OutputHead(self.decoder.out_channels, head) for _ in range(self.num_heads)
        )
        # identical initial function across heads; parameters stay separate tensors
        for other in self.heads[1:]:
            other.load_state_dict(self.heads[0].state_dict())

    def forward(self, x: torch.Tensor, head_index: int = 1) -> torch.Tensor:
        check_input(x)
        if not 1 <= head_index <= self.num_heads:
            raise ValueError(f"head_index must be in 1..{self.num_heads}, got {head_index}")
        return self.heads[head_index - 1](self.features(x), x)

    def forward_all(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input(x)
        features = self.features(x)
        return [head(features, x) for head in self.heads]

    def denoise_heads(self, image: torch.Tensor, heads: Sequence[int]) -> list[torch.Tensor]:
        """Denoised N×3×H×W batches for several heads from one body pass."""
        x, h, w = pad_to_multiple(image)
        check_input(x)
        features = self.features(x)
        return [
            apply_pixelwise_filter(x, self.heads[i - 1](features, x))[..., :h, :w] for i in heads
        ]

    def denoise_batch(self, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        index = int((variant or "head_1").split("_")[1])
        return apply_pixelwise_filter(x, self(x, index))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
        }
        for i, head in enumerate(self.heads, start=1):
            groups[f"head_{i}"] = list(head.parameters())
        return groups
