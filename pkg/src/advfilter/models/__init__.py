"""Denoising networks, the threat classifier and the architecture registry."""

from __future__ import annotations

from typing import Any

import torch

from advfilter.errors import IntegrityError, ShapeError
from advfilter.models.base import (
    BackboneConfig,
    Denoiser,
    HeadConfig,
    check_input,
    count_parameters,
    fingerprint_state,
)
from advfilter.models.classifier import PROBE_LAYERS, ResidualClassifier, classifier_from_payload
from advfilter.models.unet import AdditiveDenoiser, FilteringDenoiser, MultiHeadDenoiser
from advfilter.models.ynet import DualOutputs, YNetDenoiser

ARCHS: dict[str, type[Denoiser]] = {
    "u_add": AdditiveDenoiser,
    "u_filt": FilteringDenoiser,
    "u_multihead": MultiHeadDenoiser,
    "y_dual": YNetDenoiser,
}


def build_denoiser(arch: str, backbone: BackboneConfig, filter_size: int = 5) -> Denoiser:
    """Instantiate a freshly initialized denoiser of the given architecture tag."""
    try:
        cls = ARCHS[arch]
    except KeyError:
        raise ShapeError(f"Unknown denoiser arch {arch!r}; choose from {', '.join(ARCHS)}") from None
    kind = "additive" if arch == "u_add" else "filtering"
    return cls(backbone, HeadConfig(kind=kind, filter_size=filter_size))


def denoiser_from_payload(payload: dict[str, Any]) -> Denoiser:
    """Rebuild a denoiser from its checkpoint, verifying the weight fingerprint."""
    if payload.get("kind") != "denoiser":
        raise ShapeError(f"Checkpoint holds a {payload.get('kind')!r}, not a denoiser")
    state = payload["state_dict"]
    if fingerprint_state(state) != payload["fingerprint"]:
        raise IntegrityError(f"{payload['arch']} weights do not match their fingerprint")
    cls = ARCHS[payload["arch"]]
    model = cls(BackboneConfig.from_dict(payload["backbone"]), HeadConfig.from_dict(payload["head"]))
    model.load_state_dict(state)
    return model


def forward_u(model: Denoiser, image: torch.Tensor) -> torch.Tensor:
    """Residual (u_add) or kernel logits (u_filt) for an image padded to a multiple of 16."""
    if not isinstance(model, (AdditiveDenoiser, FilteringDenoiser)):
        raise ShapeError(f"forward_u needs u_add or u_filt, got {model.arch}")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    check_input(x)
    out = model(x)
    return out.squeeze(0) if squeeze else out


def forward_y(model: Denoiser, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(φ_sl, φ_m) kernel logits of a Y-Net."""
    if not isinstance(model, YNetDenoiser):
        raise ShapeError(f"forward_y needs y_dual, got {model.arch}")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    phi_sl, phi_m = model(x)
    if squeeze:
        return phi_sl.squeeze(0), phi_m.squeeze(0)
    return phi_sl, phi_m


def forward_multihead(model: Denoiser, image: torch.Tensor, head_index: int) -> torch.Tensor:
    """Kernel logits of head ``head_index`` (1..4)."""
    if not isinstance(model, MultiHeadDenoiser):
        raise ShapeError(f"forward_multihead needs u_multihead, got {model.arch}")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    out = model(x, head_index)
    return out.squeeze(0) if squeeze else out


__all__ = [
    "ARCHS",
    "PROBE_LAYERS",
    "AdditiveDenoiser",
    "BackboneConfig",
    "Denoiser",
    "DualOutputs",
    "FilteringDenoiser",
    "HeadConfig",
    "MultiHeadDenoiser",
    "ResidualClassifier",
    "YNetDenoiser",
    "build_denoiser",
    "classifier_from_payload",
    "count_parameters",
    "denoiser_from_payload",
    "fingerprint_state",
    "forward_multihead",
    "forward_u",
    "forward_y",
]
