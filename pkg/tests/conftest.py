"""Shared fixtures: tiny synthetic data, an untrained classifier and a 4-channel backbone."""

from __future__ import annotations

import pytest
import torch

from advfilter.attack import AttackDataset, ThreatModel, build_attack_dataset
from advfilter.config import TrainConfig
from advfilter.imaging import DatasetSource, LabeledImage, load_dataset
from advfilter.models import BackboneConfig, ResidualClassifier

NUM_CLASSES = 4
SIZE = 16
STRENGTHS = (0.01, 0.3)


@pytest.fixture
def source() -> DatasetSource:
    return DatasetSource(kind="synthetic", num_classes=NUM_CLASSES, height=SIZE, width=SIZE)


@pytest.fixture
def images(source: DatasetSource) -> list[LabeledImage]:
    return load_dataset(source, 8, seed=0)


@pytest.fixture
def test_images() -> list[LabeledImage]:
    source = DatasetSource(kind="synthetic", num_classes=NUM_CLASSES, height=SIZE, width=SIZE, split="test")
    return load_dataset(source, 8, seed=0)


@pytest.fixture
def threat() -> ThreatModel:
    torch.manual_seed(0)
    return ThreatModel(ResidualClassifier(num_classes=NUM_CLASSES, width=4), NUM_CLASSES)


@pytest.fixture
def backbone() -> BackboneConfig:
    return BackboneConfig(base_channels=4, bottleneck_channels=8)


@pytest.fixture
def attack_data(threat: ThreatModel, images: list[LabeledImage]) -> AttackDataset:
    return build_attack_dataset(threat, images, STRENGTHS, n=2, seed=0, batch_size=4, progress=False)


@pytest.fixture
def train_cfg() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, batch_size=4, epochs=1, seed=0)
