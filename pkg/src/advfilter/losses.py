"""
Training objectives.

- image_l1: mean |I − Ĩ|
- semantic_l1: mean |φ_l(I) − φ_l(Ĩ)| at a probe layer of the frozen classifier
- fusion_ce: cross-entropy of φ(fused) against φ's prediction on the clean image
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from advfilter.attack import ThreatModel
from advfilter.errors import ConfigError, ShapeError

LOSS_KINDS = ("image_l1", "semantic_l1", "fusion_ce")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "image_l1"
    probe_layer: str | None = None
    # fusion_ce only: "hard" = argmax of the clean logits, "soft" = clean softmax
    target: str = "hard"

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"Unknown loss kind {self.kind!r}")
        if self.kind == "semantic_l1" and not self.probe_layer:
            raise ConfigError("semantic_l1 needs a probe layer")
        if self.target not in ("hard", "soft"):
            raise ConfigError(f"Unknown fusion target {self.target!r}")

    @property
    def needs_threat(self) -> bool:
        return self.kind != "image_l1"


def loss_image(clean: torch.Tensor, denoised: torch.Tensor) -> torch.Tensor:
    if clean.shape != denoised.shape:
        raise ShapeError(f"Shape mismatch: {tuple(clean.shape)} vs {tuple(denoised.shape)}")
    return F.l1_loss(denoised, clean)


def loss_semantic(
    model: ThreatModel, clean: torch.Tensor, denoised: torch.Tensor, layer: str
) -> torch.Tensor:
    if clean.shape != denoised.shape:
        raise ShapeError(f"Shape mismatch: {tuple(clean.shape)} vs {tuple(denoised.shape)}")
    with torch.no_grad():
        target = model.probe(clean, layer)
    return F.l1_loss(model.probe(denoised, layer), target)


def fusion_ce(
    model: ThreatModel, clean: torch.Tensor, fused: torch.Tensor, target: str = "hard"
) -> torch.Tensor:
    with torch.no_grad():
        clean_logits = model.logits(clean)
    logits = model.logits(fused)
    if target == "hard":
        return F.cross_entropy(logits, clean_logits.argmax(dim=1))
    return F.cross_entropy(logits, F.softmax(clean_logits, dim=1))


def compute_loss(
    spec: LossSpec,
    clean: torch.Tensor,
    denoised: torch.Tensor,
    threat: ThreatModel | None = None,
) -> torch.Tensor:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "image_l1":
        return loss_image(clean, denoised)
    if threat is None:
        raise ConfigError(f"{spec.kind} needs a threat model")
    if spec.kind == "semantic_l1":
        return loss_semantic(threat, clean, denoised, spec.probe_layer)
    return fusion_ce(threat, clean, denoised, spec.target)
