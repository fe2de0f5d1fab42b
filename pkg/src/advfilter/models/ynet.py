"""
Y-Net: one encoder, two decoders (sl: small & large strengths, m: median strengths),
each with its own filtering head, plus the uncertainty-aware fusion network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from advfilter.errors import ShapeError
from advfilter.filtering import FusionNet, apply_pixelwise_filter, fuse, uncertainty_map
from advfilter.models.base import (
    BackboneConfig,
    Denoiser,
    HeadConfig,
    check_input,
    fingerprint_state,
    init_conv,
    pad_to_multiple,
)
from advfilter.models.unet import Decoder, Encoder, OutputHead

logger = logging.getLogger(__name__)


@dataclass
class DualOutputs:
    """Everything one Y-Net pass produces for a batch."""
    kernels_sl: torch.Tensor
    kernels_m: torch.Tensor
    denoised_sl: torch.Tensor
    denoised_m: torch.Tensor
    uncertainty_sl: torch.Tensor
    uncertainty_m: torch.Tensor
    weight: torch.Tensor
    fused: torch.Tensor


class YNetDenoiser(Denoiser):
    """y_dual: dual-perturbation filtering with uncertainty-aware fusion."""

    arch = "y_dual"
    variants = ("fused", "sl", "m")
    YNET_PREFIXES = ("encoder.", "decoder_sl.", "head_sl.", "decoder_m.", "head_m.")

    def __init__(self, backbone: BackboneConfig, head: HeadConfig | None = None,
                 fusion_hidden: int = 16):
        head = head or HeadConfig(kind="filtering")
        if head.kind != "filtering":
            raise ShapeError("y_dual needs filtering heads")
        super().__init__(backbone, head)
        self.encoder = Encoder(backbone)
        # decoders are initialized independently
        self.decoder_sl = Decoder(backbone)
        self.decoder_m = Decoder(backbone)
        self.head_sl = OutputHead(self.decoder_sl.out_channels, head)
        self.head_m = OutputHead(self.decoder_m.out_channels, head)
        self.fusion = FusionNet(fusion_hidden)
        for module in (self.encoder, self.decoder_sl, self.decoder_m):
            init_conv(module)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Kernel logits (φ_sl, φ_m) from one shared encoding."""
        check_input(x)
        bottleneck, skips = self.encoder(x)
        phi_sl = self.head_sl(self.decoder_sl(bottleneck, skips), x)
        phi_m = self.head_m(self.decoder_m(bottleneck, skips), x)
        return phi_sl, phi_m

    def forward_branch(self, x: torch.Tensor, branch: str) -> torch.Tensor:
        """Kernel logits of one branch only; the other decoder stays out of the graph."""
        check_input(x)
        bottleneck, skips = self.encoder(x)
        if branch == "sl":
            return self.head_sl(self.decoder_sl(bottleneck, skips), x)
        if branch == "m":
            return self.head_m(self.decoder_m(bottleneck, skips), x)
        raise ValueError(f"Unknown branch {branch!r}")

    def dual_outputs(self, image: torch.Tensor) -> DualOutputs:
        """Kernels, branch outputs, uncertainty maps, weight map and fused image for a batch."""
        x, h, w = pad_to_multiple(image)
        phi_sl, phi_m = self(x)
        i_sl = apply_pixelwise_filter(x, phi_sl)
        i_m = apply_pixelwise_filter(x, phi_m)
        u_sl = uncertainty_map(phi_sl)
        u_m = uncertainty_map(phi_m)
        weight = self.fusion(u_sl, u_m)
        fused = fuse(i_sl, i_m, weight)
        fields = (phi_sl, phi_m, i_sl, i_m, u_sl, u_m, weight, fused)
        return DualOutputs(*(t[..., :h, :w] for t in fields))

    def denoise_branches(self, image: torch.Tensor, branches: Sequence[str]) -> dict[str, torch.Tensor]:
        """Denoised batches for the requested branches; unrequested decoders are not run."""
        x, h, w = pad_to_multiple(image)
        check_input(x)
        bottleneck, skips = self.encoder(x)
        modules = {"sl": (self.decoder_sl, self.head_sl), "m": (self.decoder_m, self.head_m)}
        out = {}
        for branch in branches:
            decoder, head = modules[branch]
            out[branch] = apply_pixelwise_filter(x, head(decoder(bottleneck, skips), x))[..., :h, :w]
        return out

    def denoise_batch(self, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        variant = variant or "fused"
        if variant == "fused":
            return self.dual_outputs(x).fused
        return apply_pixelwise_filter(x, self.forward_branch(x, variant))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder_sl": list(self.decoder_sl.parameters()),
            "head_sl": list(self.head_sl.parameters()),
            "decoder_m": list(self.decoder_m.parameters()),
            "head_m": list(self.head_m.parameters()),
            "fusion": list(self.fusion.parameters()),
        }

    def ynet_parameters(self) -> list[nn.Parameter]:
        groups = self.parameter_groups()
        return [p for name, params in groups.items() if name != "fusion" for p in params]

    def ynet_fingerprint(self) -> str:
        """Fingerprint of everything except the fusion network."""
        state = {
            k: v for k, v in self.state_dict().items() if k.startswith(self.YNET_PREFIXES)
        }
        return fingerprint_state(state)
