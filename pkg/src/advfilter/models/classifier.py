"""
Small residual classifier used as the attacked model φ (and its adversarially
trained counterpart φ′).

stem -> layer1 -> layer2 -> layer3 -> global average pool -> fc. The names of the
four stages are the probe layers available to the semantic loss.
"""

from __future__ import annotations

import logging
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from advfilter.errors import IntegrityError, ShapeError
from advfilter.models.base import fingerprint_state

logger = logging.getLogger(__name__)

PROBE_LAYERS = ("stem", "layer1", "layer2", "layer3")


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Three-stage residual network for 3×H×W inputs in [0, 1]."""

    arch = "resnet_small"

    def __init__(self, num_classes: int = 10, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.layer1 = nn.Sequential(BasicBlock(width, width), BasicBlock(width, width))
        self.layer2 = nn.Sequential(BasicBlock(width, 2 * width, 2), BasicBlock(2 * width, 2 * width))
        self.layer3 = nn.Sequential(BasicBlock(2 * width, 4 * width, 2), BasicBlock(4 * width, 4 * width))
        self.fc = nn.Linear(4 * width, num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"Classifier expects N×3×H×W, got {tuple(x.shape)}")
        x = self.layer3(self.layer2(self.layer1(self.stem(x))))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))

    def checkpoint_payload(self, provenance: dict[str, Any] | None = None) -> dict[str, Any]:
        state = {k: v.detach().cpu().clone() for k, v in self.state_dict().items()}
        return {
            "kind": "classifier",
            "arch": self.arch,
            "num_classes": self.num_classes,
            "width": self.width,
            "state_dict": state,
            "fingerprint": fingerprint_state(state),
            "provenance": provenance or {},
        }


def classifier_from_payload(payload: dict[str, Any]) -> ResidualClassifier:
    """Rebuild a classifier from its checkpoint, verifying the weight fingerprint."""
    if payload.get("kind") != "classifier":
        raise ShapeError(f"Checkpoint holds a {payload.get('kind')!r}, not a classifier")
    state = payload["state_dict"]
    if fingerprint_state(state) != payload["fingerprint"]:
        raise IntegrityError("Classifier weights do not match their fingerprint")
    net = ResidualClassifier(num_classes=int(payload["num_classes"]), width=int(payload["width"]))
    net.load_state_dict(state)
    return net
