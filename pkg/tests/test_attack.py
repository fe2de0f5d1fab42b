"""Tests for PGD and the attack dataset."""

import pytest
import torch
import torch.nn.functional as F

from advfilter.attack import (
    AttackDataset,
    AttackSpec,
    ThreatModel,
    attack_success_rate,
    attack_tensor,
    batch_generator,
    build_attack_dataset,
    default_step_size,
    pgd_attack,
    pgd_perturb,
)
from advfilter.errors import AttackError, ShapeError
from advfilter.imaging import stack_images
from advfilter.models import ResidualClassifier


class TestAttackSpec:
    def test_default_step_size(self):
        assert AttackSpec(10, 0.1).step_size == pytest.approx(0.025)
        assert AttackSpec(1, 0.1).step_size == pytest.approx(0.1)
        assert default_step_size(0.3, 2) == pytest.approx(0.3)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"iterations": 0, "epsilon": 0.1},
            {"iterations": 5, "epsilon": -0.1},
            {"iterations": 5, "epsilon": 1.5},
            {"iterations": 5, "epsilon": 0.1, "step_size": 0.2},
            {"iterations": 5, "epsilon": 0.1, "norm": "l2"},
        ],
    )
    def test_invalid_specs(self, kwargs):
        with pytest.raises(AttackError):
            AttackSpec(**kwargs)


class TestPGD:
    def test_stays_in_ball_and_range(self, threat, images):
        x, y = stack_images(images)
        adv = pgd_perturb(threat.logits, x, y, AttackSpec(5, 0.05), batch_generator(0, 0),
                          check_projection=True)
        assert (adv - x).abs().max() <= 0.05 + 1e-6
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_zero_strength_returns_clean_copy(self, threat, images):
        x, y = stack_images(images)
        adv = pgd_perturb(threat.logits, x, y, AttackSpec(5, 0.0))
        assert torch.equal(adv, x)
        assert adv.data_ptr() != x.data_ptr()

    def test_deterministic_per_seed(self, threat, images):
        x, y = stack_images(images)
        spec = AttackSpec(3, 0.1)
        first = attack_tensor(threat, x, y, spec, seed=7, batch_size=4)
        second = attack_tensor(threat, x, y, spec, seed=7, batch_size=4)
        other = attack_tensor(threat, x, y, spec, seed=8, batch_size=4)
        assert torch.equal(first, second)
        assert not torch.equal(first, other)

    def test_increases_classifier_loss(self, threat, images):
        x, y = stack_images(images)
        adv = pgd_perturb(threat.logits, x, y, AttackSpec(10, 0.3), batch_generator(1, 0))
        with torch.no_grad():
            clean_loss = F.cross_entropy(threat.logits(x), y, reduction="sum")
            adv_loss = F.cross_entropy(threat.logits(adv), y, reduction="sum")
        assert adv_loss > clean_loss

    def test_runs_under_no_grad(self, threat, images):
        x, y = stack_images(images)
        with torch.no_grad():
            adv = pgd_perturb(threat.logits, x, y, AttackSpec(2, 0.1), batch_generator(0, 0))
        assert not torch.equal(adv, x)

    def test_non_differentiable_forward(self, threat, images):
        x, y = stack_images(images)
        with pytest.raises(AttackError):
            pgd_perturb(lambda t: threat.logits(t).detach(), x, y, AttackSpec(2, 0.1))

    def test_single_image(self, threat, images):
        pair = pgd_attack(threat, images[0], AttackSpec(3, 0.05), seed=0)
        assert pair.adversarial.shape == images[0].image.shape
        assert pair.epsilon == 0.05
        assert (pair.adversarial - images[0].image).abs().max() <= 0.05 + 1e-6


class TestThreatModel:
    def test_frozen_and_fingerprinted(self, threat):
        assert all(not p.requires_grad for p in threat.network.parameters())
        assert not threat.network.training
        assert len(threat.fingerprint()) == 64

    def test_probe_layers(self, threat, images):
        x, _ = stack_images(images)
        assert threat.probe(x, "layer1").shape == (8, 4, 16, 16)
        with pytest.raises(ShapeError):
            threat.probe(x, "fc")

    def test_payload_round_trip_keeps_fingerprint(self, threat):
        restored = ThreatModel.from_payload(threat.network.checkpoint_payload({"origin": "test"}))
        assert restored.fingerprint() == threat.fingerprint()
        assert restored.provenance == {"origin": "test"}

    def test_wrong_class_count(self, images):
        model = ThreatModel(ResidualClassifier(num_classes=3, width=4), num_classes=4)
        x, _ = stack_images(images)
        with pytest.raises(ShapeError):
            model.logits(x)


class TestAttackDataset:
    def test_layout(self, attack_data, images):
        assert attack_data.num_images == 8
        assert len(attack_data) == 16
        assert attack_data.epsilons == (0.01, 0.3)
        pair = attack_data[9]
        assert pair.epsilon == 0.3
        assert pair.source_index == 1
        assert pair.clean.label == images[1].label
        assert torch.equal(pair.adversarial, attack_data.adversarial[1][1])
        assert len(attack_data[2:5]) == 3

    def test_every_pair_within_its_strength(self, attack_data):
        for pair in attack_data:
            assert (pair.adversarial - pair.clean.image).abs().max() <= pair.epsilon + 1e-6

    def test_stack_lookup(self, attack_data):
        assert torch.equal(attack_data.stack(0.0), attack_data.clean)
        assert torch.equal(attack_data.stack(0.3), attack_data.adversarial[1])
        with pytest.raises(KeyError):
            attack_data.stack(0.2)

    def test_subset(self, attack_data):
        sub = attack_data.subset([0.3])
        assert sub.epsilons == (0.3,)
        assert len(sub) == 8
        assert torch.equal(sub.stack(0.3), attack_data.stack(0.3))

    def test_mismatched_stacks_rejected(self, attack_data):
        with pytest.raises(ShapeError):
            AttackDataset(attack_data.clean, attack_data.labels, [0.1], [attack_data.clean[:2]], 2)

    def test_success_rate_bounds(self, threat, attack_data):
        rate = attack_success_rate(threat, attack_data)
        assert 0.0 <= rate <= 1.0
        assert attack_success_rate(threat, list(attack_data)) == pytest.approx(rate)

    def test_empty_inputs_rejected(self, threat, images):
        with pytest.raises(AttackError):
            build_attack_dataset(threat, [], (0.1,), n=1, seed=0, progress=False)
        with pytest.raises(AttackError):
            build_attack_dataset(threat, images, (), n=1, seed=0, progress=False)
