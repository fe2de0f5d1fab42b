"""
Untargeted L∞ PGD attacks against a frozen classifier.

The attack always targets the undefended classifier; denoisers are never in
the loop. Every batch draws its random start from its own generator, seeded
from (seed, strength index, batch index), so a rerun with the same batch size
reproduces every adversarial image exactly.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Callable, overload

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from advfilter.errors import AttackError, NumericalError, ShapeError
from advfilter.imaging import LabeledImage, stack_images
from advfilter.models.base import fingerprint_state
from advfilter.models.classifier import PROBE_LAYERS, classifier_from_payload

logger = logging.getLogger(__name__)

PROJECTION_TOLERANCE = 1e-6
STEP_FACTOR = 2.5


def default_step_size(epsilon: float, iterations: int) -> float:
    return min(STEP_FACTOR * epsilon / iterations, epsilon)


@dataclass(frozen=True)
class AttackSpec:
    """PGD(n, ε) under the L∞ norm. ``step_size`` defaults to min(2.5·ε/n, ε)."""
    iterations: int
    epsilon: float
    step_size: float | None = None
    norm: str = "linf"

    def __post_init__(self) -> None:
        if self.step_size is None:
            object.__setattr__(self, "step_size", default_step_size(self.epsilon, max(self.iterations, 1)))
        self.validate()

    def validate(self) -> None:
        if self.norm != "linf":
            raise AttackError(f"Only the L∞ norm is supported, got {self.norm!r}")
        if self.iterations < 1:
            raise AttackError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epsilon > 0 and not 0.0 < self.step_size <= self.epsilon:
            raise AttackError(f"step size {self.step_size} outside (0, ε={self.epsilon}]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "norm": self.norm,
        }


@dataclass(eq=False)
class ThreatModel:
    """A frozen classifier φ with named probe layers φ_l."""
    network: nn.Module
    num_classes: int
    probe_layers: tuple[str, ...] = PROBE_LAYERS
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.network.eval()
        self.network.requires_grad_(False)
        self._fingerprint = fingerprint_state(self.network.state_dict())

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> ThreatModel:
        net = classifier_from_payload(payload)
        return cls(net, net.num_classes, provenance=dict(payload.get("provenance", {})))

    @property
    def device(self) -> torch.device:
        return next(self.network.parameters()).device

    def to(self, device: torch.device) -> ThreatModel:
        self.network.to(device)
        return self

    def fingerprint(self) -> str:
        return self._fingerprint

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        out = self.network(x.unsqueeze(0) if squeeze else x)
        if out.shape[-1] != self.num_classes:
            raise ShapeError(f"Classifier returned {out.shape[-1]} logits, expected {self.num_classes}")
        return out.squeeze(0) if squeeze else out

    def probe(self, x: torch.Tensor, layer: str) -> torch.Tensor:
        """Activations of ``layer`` for the batch ``x``."""
        if layer not in self.probe_layers:
            raise ShapeError(f"Unknown probe layer {layer!r}; choose from {', '.join(self.probe_layers)}")
        try:
            module = self.network.get_submodule(layer)
        except AttributeError as e:
            raise ShapeError(f"Classifier has no layer {layer!r}") from e
        captured: dict[str, torch.Tensor] = {}
        handle = module.register_forward_hook(lambda _m, _i, out: captured.__setitem__("out", out))
        try:
            self.network(x)
        finally:
            handle.remove()
        return captured["out"]

    @torch.no_grad()
    def predict(self, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        """Top-1 class per image, on the CPU."""
        preds = [
            self.logits(x[i:i + batch_size].to(self.device)).argmax(dim=1).cpu()
            for i in range(0, len(x), batch_size)
        ]
        return torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)

    @torch.no_grad()
    def mean_loss(self, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
        """Mean cross-entropy of the classifier on (x, y)."""
        if len(x) == 0:
            return 0.0
        total = sum(
            float(F.cross_entropy(self.logits(x[i:i + batch_size].to(self.device)),
                                  y[i:i + batch_size].to(self.device), reduction="sum"))
            for i in range(0, len(x), batch_size)
        )
        return total / len(x)

    def accuracy(self, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
        if len(x) == 0:
            return 0.0
        return float((self.predict(x, batch_size) == y.cpu()).float().mean())


@dataclass(frozen=True, eq=False)
class AdversarialPair:
    """Clean image, its attacked version and the attack that produced it."""
    clean: LabeledImage
    adversarial: torch.Tensor
    spec: AttackSpec
    source_index: int = -1

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon


class AttackDataset(Sequence[AdversarialPair]):
    """
    Adversarial pairs stored column-wise: one clean stack plus one adversarial
    stack per strength. Indexing is strength-major.
    """

    def __init__(
        self,
        clean: torch.Tensor,
        labels: torch.Tensor,
        epsilons: Sequence[float],
        adversarial: Sequence[torch.Tensor],
        iterations: int,
        seed: int = 0,
    ):
        if len(epsilons) != len(adversarial):
            raise ShapeError("One adversarial stack per strength is required")
        for eps, stack in zip(epsilons, adversarial):
            if stack.shape != clean.shape:
                raise ShapeError(f"Adversarial stack for ε={eps} does not match the clean stack")
        self.clean = clean
        self.labels = labels
        self.epsilons = tuple(float(e) for e in epsilons)
        self.adversarial = list(adversarial)
        self.iterations = iterations
        self.seed = seed

    @property
    def num_images(self) -> int:
        return len(self.clean)

    def __len__(self) -> int:
        return self.num_images * len(self.epsilons)

    @overload
    def __getitem__(self, index: int) -> AdversarialPair: ...

    @overload
    def __getitem__(self, index: slice) -> list[AdversarialPair]: ...

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        s_idx, i = divmod(index, self.num_images)
        eps = self.epsilons[s_idx]
        return AdversarialPair(
            clean=LabeledImage(self.clean[i], int(self.labels[i])),
            adversarial=self.adversarial[s_idx][i],
            spec=AttackSpec(self.iterations, eps),
            source_index=i,
        )

    def strength_index(self, epsilon: float) -> int:
        for s_idx, eps in enumerate(self.epsilons):
            if abs(eps - epsilon) <= 1e-9 + 1e-6 * abs(eps):
                return s_idx
        raise KeyError(f"ε={epsilon} not in dataset grid {self.epsilons}")

    def stack(self, epsilon: float) -> torch.Tensor:
        """N×3×H×W adversarial images for one strength (the clean stack for ε=0 if absent)."""
        if epsilon == 0.0 and not any(e == 0.0 for e in self.epsilons):
            return self.clean
        return self.adversarial[self.strength_index(epsilon)]

    def subset(self, epsilons: Sequence[float]) -> AttackDataset:
        indices = [self.strength_index(e) for e in epsilons]
        return AttackDataset(
            self.clean,
            self.labels,
            [self.epsilons[i] for i in indices],
            [self.adversarial[i] for i in indices],
            self.iterations,
            self.seed,
        )


def batch_generator(seed: int, *keys: int) -> torch.Generator:
    """CPU generator for one attack batch, derived from (seed, *keys)."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _check_projection(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float, step: int) -> None:
    gap = float((x_adv - x).abs().max())
    if gap > epsilon + PROJECTION_TOLERANCE or x_adv.min() < 0 or x_adv.max() > 1:
        raise NumericalError(f"PGD step {step}: projection violated (‖δ‖∞={gap:.3g}, ε={epsilon})")


def pgd_perturb(
    forward: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    y: torch.Tensor,
    spec: AttackSpec,
    generator: torch.Generator | None = None,
    check_projection: bool = False,
) -> torch.Tensor:
    """
    Run PGD on a batch.

    Args:
        forward: Differentiable map N×3×H×W -> N×classes logits.
        x: Clean batch in [0, 1].
        y: Ground-truth labels.
        spec: Attack parameters.
        generator: CPU generator for the random start.
        check_projection: Verify the L∞/range projection after every step.

    Returns:
        The attacked batch, detached.
    """
    spec.validate()
    if spec.epsilon == 0.0:
        return x.detach().clone()

    eps = spec.epsilon
    x = x.detach()
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype)
    x_adv = (x + (2.0 * noise.to(x.device) - 1.0) * eps).clamp(0.0, 1.0)

    for step in range(1, spec.iterations + 1):
        x_adv.requires_grad_(True)
        with torch.enable_grad():
            # sum reduction keeps each image's gradient independent of the batch size
            loss = F.cross_entropy(forward(x_adv), y, reduction="sum")
            try:
                (grad,) = torch.autograd.grad(loss, x_adv)
            except RuntimeError as e:
                raise AttackError(f"Classifier is not differentiable w.r.t. its input: {e}") from e
        if not torch.isfinite(grad).all():
            raise NumericalError(f"Non-finite gradient at PGD step {step} (ε={eps}, n={spec.iterations})")
        x_adv = x_adv.detach() + spec.step_size * grad.sign()
        x_adv = torch.min(torch.max(x_adv, x - eps), x + eps).clamp(0.0, 1.0)
        if check_projection:
            _check_projection(x_adv, x, eps, step)
    return x_adv.detach()


def pgd_attack(
    model: ThreatModel,
    item: LabeledImage,
    spec: AttackSpec,
    seed: int,
    check_projection: bool = False,
) -> AdversarialPair:
    """Attack a single labeled image."""
    x = item.image.unsqueeze(0).to(model.device)
    y = torch.tensor([item.label], device=model.device)
    adv = pgd_perturb(model.logits, x, y, spec, batch_generator(seed, 0), check_projection)
    return AdversarialPair(item, adv.squeeze(0).to(item.image.device), spec)


def attack_tensor(
    model: ThreatModel,
    x: torch.Tensor,
    y: torch.Tensor,
    spec: AttackSpec,
    seed: int,
    stream: int = 0,
    batch_size: int = 32,
    progress: bool = False,
) -> torch.Tensor:
    """Attack a stacked batch in chunks; chunk b uses generator (seed, stream, b)."""
    device = model.device
    chunks = []
    starts = range(0, len(x), batch_size)
    for b_idx, start in enumerate(tqdm(starts, desc=f"PGD ε={spec.epsilon:g}", leave=False,
                                       disable=not progress)):
        xb = x[start:start + batch_size].to(device)
        yb = y[start:start + batch_size].to(device)
        adv = pgd_perturb(model.logits, xb, yb, spec, batch_generator(seed, stream, b_idx),
                          check_projection=logger.isEnabledFor(logging.DEBUG))
        chunks.append(adv.cpu())
    return torch.cat(chunks)


def build_attack_dataset(
    model: ThreatModel,
    images: Sequence[LabeledImage],
    strengths: Sequence[float],
    n: int,
    seed: int,
    batch_size: int = 32,
    progress: bool = True,
) -> AttackDataset:
    """
    Attack every image at every strength.

    Returns:
        |images| × |strengths| pairs, strength-major, each recording its ε.
    """
    if not images:
        raise AttackError("Cannot build an attack dataset from an empty image set")
    if not strengths:
        raise AttackError("At least one attack strength is required")
    clean, labels = stack_images(images)
    clean_acc = model.accuracy(clean, labels)
    logger.info(f"Attacking {len(images)} images at {len(strengths)} strengths "
                f"(n={n}, clean accuracy {clean_acc:.3f})")

    stacks = []
    for s_idx, eps in enumerate(tqdm(strengths, desc="strengths", disable=not progress)):
        spec = AttackSpec(n, float(eps))
        adv = attack_tensor(model, clean, labels, spec, seed, s_idx, batch_size, progress)
        adv_acc = model.accuracy(adv, labels)
        logger.info(f"ε={eps:g}: accuracy {adv_acc:.3f}, success rate {1.0 - adv_acc:.3f}")
        stacks.append(adv)
    return AttackDataset(clean, labels, strengths, stacks, n, seed)


def attack_success_rate(model: ThreatModel, pairs: Sequence[AdversarialPair]) -> float:
    """Fraction of pairs whose adversarial image is misclassified."""
    if len(pairs) == 0:
        raise AttackError("attack_success_rate needs at least one pair")
    if isinstance(pairs, AttackDataset):
        wrong = sum(
            int((model.predict(stack) != pairs.labels).sum()) for stack in pairs.adversarial
        )
        return wrong / len(pairs)
    x = torch.stack([p.adversarial for p in pairs])
    y = torch.tensor([p.clean.label for p in pairs])
    return float((model.predict(x) != y).float().mean())
