"""
Base class and shared configuration for denoising networks.

Each denoiser (additive, filtering, multi-head, Y-Net) implements this interface
so training, evaluation and the artifact store can treat them uniformly:
- forward(): raw network output (residual or kernel logits)
- denoise(): the full denoising operator, optionally for a named variant
- parameter_groups(): named parameter sets used for domain routing
- fingerprint(): content hash of the weights
"""

from __future__ import annotations

import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Any, ClassVar, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from advfilter.errors import ShapeError

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 16
ENCODER_BLOCKS = 5
DECODER_BLOCKS = 3


@dataclass(frozen=True)
class BackboneConfig:
    """8-block U-shaped backbone: 5 encoder blocks, 3 decoder blocks, skips 2,3,4 -> 8,7,6."""
    base_channels: int = 32
    bottleneck_channels: int = 128
    in_channels: int = 3

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(
            min(self.base_channels * 2**i, self.bottleneck_channels) for i in range(ENCODER_BLOCKS)
        )

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BackboneConfig:
        return cls(
            base_channels=int(data.get("base_channels", 32)),
            bottleneck_channels=int(data.get("bottleneck_channels", 128)),
            in_channels=int(data.get("in_channels", 3)),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class HeadConfig:
    """Output head: 3 residual channels (additive) or 3·K² kernel logits (filtering)."""
    kind: str = "filtering"  # additive | filtering
    filter_size: int = 5
    # Center logit at init; softmax then keeps most weight on the pixel itself
    identity_logit: float = 5.0

    def __post_init__(self) -> None:
        if self.kind not in ("additive", "filtering"):
            raise ShapeError(f"Unknown head kind {self.kind!r}")
        if self.kind == "filtering" and (self.filter_size < 1 or self.filter_size % 2 == 0):
            raise ShapeError(f"Filter size must be a positive odd integer, got {self.filter_size}")

    @property
    def output_channels(self) -> int:
        return 3 if self.kind == "additive" else 3 * self.filter_size**2

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> HeadConfig:
        return cls(
            kind=data.get("kind", "filtering"),
            filter_size=int(data.get("filter_size", 5)),
            identity_logit=float(data.get("identity_logit", 5.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def fingerprint_state(state: dict[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names, dtypes, shapes and bytes, in sorted key order."""
    digest = hashlib.sha256()
    for key in sorted(state):
        tensor = state[key].detach().cpu().contiguous()
        digest.update(key.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def count_parameters(params: Iterable[nn.Parameter]) -> int:
    return sum(p.numel() for p in params)


def init_conv(module: nn.Module) -> None:
    """He-uniform weights, zero bias, for every conv in ``module``."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def pad_to_multiple(x: torch.Tensor, multiple: int = DOWNSAMPLE_FACTOR) -> tuple[torch.Tensor, int, int]:
    """Replicate-pad bottom/right so H and W divide ``multiple``; returns (padded, H, W)."""
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return x, h, w


def check_input(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"Expected N×3×H×W input, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ShapeError(f"Input {h}×{w} is not padded to a multiple of {DOWNSAMPLE_FACTOR}")


class Denoiser(nn.Module, ABC):
    """Abstract base class for denoising networks."""

    arch: ClassVar[str]
    variants: ClassVar[tuple[str, ...]] = ()

    def __init__(self, backbone: BackboneConfig, head: HeadConfig):
        super().__init__()
        self.backbone_config = backbone
        self.head_config = head

    @abstractmethod
    def denoise_batch(self, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        """Denoise an N×3×H×W batch whose size is already a multiple of 16."""

    @abstractmethod
    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named, disjoint parameter groups."""

    def denoise(self, image: torch.Tensor, variant: str | None = None) -> torch.Tensor:
        """Denoise a 3×H×W image or N×3×H×W batch of any size >= 8."""
        if variant is not None and variant not in self.variants:
            raise ShapeError(f"{self.arch} has no output variant {variant!r}")
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        padded, h, w = pad_to_multiple(x)
        out = self.denoise_batch(padded, variant)[..., :h, :w]
        return out.squeeze(0) if squeeze else out

    def fingerprint(self) -> str:
        return fingerprint_state(self.state_dict())

    def group_of(self) -> dict[int, str]:
        """id(parameter) -> group name."""
        return {id(p): name for name, params in self.parameter_groups().items() for p in params}

    def checkpoint_payload(self, provenance: dict[str, Any] | None = None) -> dict[str, Any]:
        """Self-describing checkpoint contents (plain types + tensors only)."""
        state = {k: v.detach().cpu().clone() for k, v in self.state_dict().items()}
        return {
            "kind": "denoiser",
            "arch": self.arch,
            "backbone": self.backbone_config.to_dict(),
            "head": self.head_config.to_dict(),
            "state_dict": state,
            "fingerprint": fingerprint_state(state),
            "provenance": provenance or {},
        }
