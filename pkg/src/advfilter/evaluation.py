"""
Denoise-then-classify evaluation.

Test images are attacked once per (classifier fingerprint, ε, n) and cached,
so every pipeline sharing a classifier sees identical attacked images.
Accuracy cells are exact counts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
import torch

from advfilter.artifacts import ArtifactStore
from advfilter.attack import AttackDataset, AttackSpec, ThreatModel, attack_tensor
from advfilter.config import TrainConfig
from advfilter.errors import ConfigError, IntegrityError, MissingArtifactError
from advfilter.filtering import apply_pixelwise_filter, uncertainty_map
from advfilter.imaging import LabeledImage, QualityReport, batch_psnr, batch_ssim, stack_images
from advfilter.models import (
    Denoiser,
    FilteringDenoiser,
    MultiHeadDenoiser,
    ResidualClassifier,
    YNetDenoiser,
)
from advfilter.models.base import pad_to_multiple
from advfilter.training import TrainReport, train_classifier

logger = logging.getLogger(__name__)

# Robust-accuracy gain an adversarially trained classifier must show over the clean one
ROBUST_GAIN = 0.2

# pipeline name -> (denoiser artifact, output variant)
PIPELINE_SOURCES: dict[str, tuple[str | None, str | None]] = {
    "none": (None, None),
    "add_lsem": ("add_lsem", None),
    "filt_lsem": ("filt_lsem", None),
    "add_limg": ("add_limg", None),
    "filt_limg": ("filt_limg", None),
    "filt_limg_star": ("filt_limg_star", None),
    **{f"multihead_h{i}": ("multihead", f"head_{i}") for i in range(1, 5)},
    "advfilter_sl": ("advfilter", "sl"),
    "advfilter_m": ("advfilter", "m"),
    "advfilter": ("advfilter", "fused"),
}


def expand_pipelines(names: Sequence[str]) -> list[str]:
    """'multihead' stands for its four per-head rows."""
    out: list[str] = []
    for name in names:
        expanded = [f"multihead_h{i}" for i in range(1, 5)] if name == "multihead" else [name]
        for item in expanded:
            if item not in PIPELINE_SOURCES:
                raise ConfigError(f"Unknown pipeline {item!r}")
            if item not in out:
                out.append(item)
    return out


def epsilon_key(eps: float) -> float:
    return float(f"{eps:.10g}")


@dataclass(frozen=True)
class SweepSpec:
    """Grid of attack cells to evaluate; ε = 0 cells are clean images."""
    epsilon_grid: tuple[float, ...]
    iteration_grid: tuple[int, ...] = (40,)
    images_per_cell: int = 500
    extra_cells: tuple[tuple[float, int], ...] = ()

    def __post_init__(self) -> None:
        if not self.epsilon_grid or not self.iteration_grid:
            raise ConfigError("Sweep grids must be non-empty")
        if self.images_per_cell < 1:
            raise ConfigError("images_per_cell must be >= 1")

    def cells(self) -> list[tuple[float, int]]:
        cells = [(epsilon_key(e), int(n)) for n in self.iteration_grid for e in self.epsilon_grid]
        for e, n in self.extra_cells:
            if (epsilon_key(e), int(n)) not in cells:
                cells.append((epsilon_key(e), int(n)))
        return cells

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon_grid": list(self.epsilon_grid),
            "iteration_grid": list(self.iteration_grid),
            "images_per_cell": self.images_per_cell,
            "extra_cells": [list(c) for c in self.extra_cells],
        }


@dataclass
class PipelineSpec:
    """classifier(denoiser(x)); attacks target ``attacked`` (default: the classifier itself)."""
    name: str
    classifier: ThreatModel
    denoiser: Denoiser | None = None
    variant: str | None = None
    classifier_label: str = "clean"
    attacked: ThreatModel | None = None
    expected_fingerprint: str | None = None

    @property
    def attacker(self) -> ThreatModel:
        return self.attacked or self.classifier

    def fingerprints(self) -> dict[str, str]:
        out = {"classifier": self.classifier.fingerprint(), "attacked": self.attacker.fingerprint()}
        if self.denoiser is not None:
            out["denoiser"] = self.denoiser.fingerprint()
        return out


@dataclass
class Cell:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class SweepResult:
    """Accuracy per (ε, n) cell, quality and kernel statistics per ε, and provenance."""
    pipeline: str
    classifier: str = "clean"
    accuracy: dict[tuple[float, int], Cell] = field(default_factory=dict)
    quality: dict[float, QualityReport] = field(default_factory=dict)
    input_quality: dict[float, QualityReport] = field(default_factory=dict)
    statistics: dict[float, dict[str, float]] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def accuracy_at(self, eps: float, n: int | None = None) -> float:
        key = epsilon_key(eps)
        for (e, cell_n), cell in self.accuracy.items():
            if e == key and (n is None or cell_n == n):
                return cell.accuracy
        raise MissingArtifactError(f"{self.pipeline}: no cell for ε={eps}, n={n}")

    def epsilons(self, n: int | None = None) -> list[float]:
        return sorted({e for e, cell_n in self.accuracy if n is None or cell_n == n})

    def iterations(self) -> list[int]:
        return sorted({n for _, n in self.accuracy})

    def frame(self) -> pd.DataFrame:
        """Long table: one row per cell."""
        rows = []
        for (eps, n), cell in sorted(self.accuracy.items()):
            q = self.quality.get(eps)
            iq = self.input_quality.get(eps)
            rows.append({
                "pipeline": self.pipeline,
                "classifier": self.classifier,
                "epsilon": eps,
                "iterations": n,
                "correct": cell.correct,
                "total": cell.total,
                "accuracy": cell.accuracy,
                "psnr": q.psnr if q else np.nan,
                "ssim": q.ssim if q else np.nan,
                "input_psnr": iq.psnr if iq else np.nan,
                "input_ssim": iq.ssim if iq else np.nan,
                **self.statistics.get(eps, {}),
            })
        return pd.DataFrame(rows)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipeline": self.pipeline,
            "classifier": self.classifier,
            "accuracy": [[e, n, c.correct, c.total] for (e, n), c in sorted(self.accuracy.items())],
            "quality": {repr(e): [q.psnr, q.ssim] for e, q in self.quality.items()},
            "input_quality": {repr(e): [q.psnr, q.ssim] for e, q in self.input_quality.items()},
            "statistics": {repr(e): s for e, s in self.statistics.items()},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepResult:
        return cls(
            pipeline=data["pipeline"],
            classifier=data.get("classifier", "clean"),
            accuracy={(float(e), int(n)): Cell(int(c), int(t)) for e, n, c, t in data["accuracy"]},
            quality={float(e): QualityReport(*v) for e, v in data.get("quality", {}).items()},
            input_quality={float(e): QualityReport(*v) for e, v in data.get("input_quality", {}).items()},
            statistics={float(e): s for e, s in data.get("statistics", {}).items()},
            provenance=data.get("provenance", {}),
        )


class AttackCache:
    """Attacked test images per (classifier, ε, n), in memory and optionally in the artifact store."""

    def __init__(
        self,
        images: Sequence[LabeledImage],
        seed: int,
        batch_size: int = 32,
        store: ArtifactStore | None = None,
        progress: bool = False,
    ):
        self.clean, self.labels = stack_images(images)
        self.seed = seed
        self.batch_size = batch_size
        self.store = store
        self.progress = progress
        self._memory: dict[tuple[str, float, int], torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.clean)

    @staticmethod
    def stream(eps: float, n: int) -> int:
        return n * 10**7 + int(round(eps * 1e6))

    def get(self, model: ThreatModel, eps: float, n: int) -> torch.Tensor:
        eps = epsilon_key(eps)
        key = (model.fingerprint(), eps, n)
        if key in self._memory:
            return self._memory[key]
        if eps == 0.0:
            adv = self.clean
        else:
            adv = self._from_store(model, eps, n)
            if adv is None:
                spec = AttackSpec(n, eps)
                adv = attack_tensor(model, self.clean, self.labels, spec, self.seed,
                                    self.stream(eps, n), self.batch_size, self.progress)
                self._to_store(model, eps, n, adv)
        self._memory[key] = adv
        return adv

    def _recipe(self, model: ThreatModel, eps: float, n: int) -> tuple[str, dict[str, Any]]:
        name = f"test_attacks/{model.fingerprint()[:16]}/n{n}_eps{eps:g}"
        recipe = {
            "threat": model.fingerprint(),
            "epsilon": eps,
            "iterations": n,
            "seed": self.seed,
            "images": len(self.clean),
            "clean_sum": float(self.clean.double().sum()),
        }
        return name, recipe

    def _from_store(self, model: ThreatModel, eps: float, n: int) -> torch.Tensor | None:
        if self.store is None:
            return None
        name, recipe = self._recipe(model, eps, n)
        if self.store.lookup(name, recipe) is None:
            return None
        return self.store.load_attack_dataset(name).adversarial[0]

    def _to_store(self, model: ThreatModel, eps: float, n: int, adv: torch.Tensor) -> None:
        if self.store is None:
            return
        name, recipe = self._recipe(model, eps, n)
        dataset = AttackDataset(self.clean, self.labels, [eps], [adv], n, self.seed)
        self.store.put_attack_dataset(name, dataset, recipe, model.fingerprint())


def kernel_statistics(
    denoiser: Denoiser, variant: str | None, x: torch.Tensor
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    Denoise ``x`` and collect per-image means of the maps behind the output:
    the uncertainty map of filtering denoisers, plus branch uncertainties and
    the fusion weight map for the Y-Net. The Y-Net's mean_uncertainty is the
    selected branch's, and the sl branch's for the fused output.
    """
    if isinstance(denoiser, YNetDenoiser):
        out = denoiser.dual_outputs(x)
        stats = {
            "mean_uncertainty_sl": out.uncertainty_sl.flatten(1).mean(dim=1),
            "mean_uncertainty_m": out.uncertainty_m.flatten(1).mean(dim=1),
            "mean_weight": out.weight.flatten(1).mean(dim=1),
        }
        if variant == "sl":
            return out.denoised_sl, {**stats, "mean_uncertainty": stats["mean_uncertainty_sl"]}
        if variant == "m":
            return out.denoised_m, {**stats, "mean_uncertainty": stats["mean_uncertainty_m"]}
        return out.fused, {**stats, "mean_uncertainty": stats["mean_uncertainty_sl"]}
    if isinstance(denoiser, (FilteringDenoiser, MultiHeadDenoiser)):
        padded, h, w = pad_to_multiple(x)
        if isinstance(denoiser, MultiHeadDenoiser):
            index = int((variant or "head_1").split("_")[1])
            logits = denoiser(padded, index)
        else:
            logits = denoiser(padded)
        denoised = apply_pixelwise_filter(padded, logits)[..., :h, :w]
        u = uncertainty_map(logits)[..., :h, :w]
        return denoised, {"mean_uncertainty": u.flatten(1).mean(dim=1)}
    return denoiser.denoise(x, variant), {}


@torch.no_grad()
def _run_cell(
    pipe: PipelineSpec, adv: torch.Tensor, clean: torch.Tensor, labels: torch.Tensor,
    batch_size: int, with_quality: bool,
) -> tuple[Cell, dict[str, float]]:
    device = pipe.classifier.device
    correct = 0
    sums: dict[str, float] = {}
    for start in range(0, len(adv), batch_size):
        xb = adv[start:start + batch_size].to(device)
        stats: dict[str, torch.Tensor] = {}
        if pipe.denoiser is not None:
            xb, stats = kernel_statistics(pipe.denoiser, pipe.variant, xb)
        preds = pipe.classifier.logits(xb).argmax(dim=1).cpu()
        correct += int((preds == labels[start:start + batch_size]).sum())
        if with_quality:
            cb = clean[start:start + batch_size].to(device)
            stats = {
                **stats,
                "psnr": batch_psnr(xb, cb),
                "input_psnr": batch_psnr(adv[start:start + batch_size].to(device), cb),
            }
            if min(cb.shape[-2:]) >= 11:
                stats["ssim"] = batch_ssim(xb, cb)
                stats["input_ssim"] = batch_ssim(adv[start:start + batch_size].to(device), cb)
        for key, values in stats.items():
            sums[key] = sums.get(key, 0.0) + float(values.double().sum())
    n = len(adv)
    return Cell(correct, n), {k: v / n for k, v in sums.items()}


def evaluate_pipeline(
    pipe: PipelineSpec,
    sweep: SweepSpec,
    data: Sequence[LabeledImage] | AttackCache,
    seed: int = 0,
    batch_size: int = 64,
) -> SweepResult:
    """
    Top-1 accuracy of classifier(denoiser(attacked)) for every sweep cell,
    plus PSNR/SSIM (denoised vs clean, attacked vs clean) and kernel statistics per ε.
    """
    if pipe.denoiser is not None and pipe.expected_fingerprint is not None:
        if pipe.denoiser.fingerprint() != pipe.expected_fingerprint:
            raise IntegrityError(f"{pipe.name}: denoiser fingerprint differs from its manifest",
                                 artifact=pipe.name)
    cache = data if isinstance(data, AttackCache) else AttackCache(data, seed)
    count = sweep.images_per_cell
    if len(cache) < count:
        raise ConfigError(f"{pipe.name}: {count} images per cell requested, {len(cache)} available")
    if pipe.denoiser is not None:
        pipe.denoiser.eval()
        pipe.denoiser.to(pipe.classifier.device)

    clean, labels = cache.clean[:count], cache.labels[:count]
    result = SweepResult(pipeline=pipe.name, classifier=pipe.classifier_label)
    quality_n = sweep.iteration_grid[0]
    for eps, n in sweep.cells():
        adv = cache.get(pipe.attacker, eps, n)[:count]
        with_quality = n == quality_n and eps not in result.quality
        cell, means = _run_cell(pipe, adv, clean, labels, batch_size, with_quality)
        result.accuracy[(eps, n)] = cell
        if with_quality:
            result.quality[eps] = QualityReport(means.pop("psnr"), means.pop("ssim", float("nan")))
            result.input_quality[eps] = QualityReport(
                means.pop("input_psnr"), means.pop("input_ssim", float("nan"))
            )
            result.statistics[eps] = means
        logger.info(f"{pipe.name}[{pipe.classifier_label}] ε={eps:g} n={n}: "
                    f"{cell.correct}/{cell.total} = {cell.accuracy:.3f}")

    result.provenance = {
        "pipeline": pipe.name,
        "variant": pipe.variant,
        "classifier": pipe.classifier_label,
        "fingerprints": pipe.fingerprints(),
        "sweep": sweep.to_dict(),
        "seed": cache.seed,
        "ssim": "single-scale, 11x11 Gaussian window, sigma 1.5",
    }
    if "robustness" in pipe.classifier.provenance:
        result.provenance["classifier_robustness"] = pipe.classifier.provenance["robustness"]
    return result


def build_adversarially_trained_classifier(
    data: Sequence[LabeledImage],
    attack: AttackSpec,
    cfg: TrainConfig,
    num_classes: int = 10,
    width: int = 32,
    device: torch.device | str = "cpu",
    reference: ThreatModel | None = None,
    holdout: Sequence[LabeledImage] | None = None,
) -> tuple[ThreatModel, TrainReport]:
    """
    PGD adversarial training (attack regenerated per batch against the
    current weights). With ``reference`` and ``holdout`` given, robust
    accuracies of both classifiers at the training strength are recorded.
    """
    network = ResidualClassifier(num_classes=num_classes, width=width)
    report = train_classifier(network, data, cfg, device, adversarial=attack, name="adv_threat")
    robust = ThreatModel(network, num_classes, provenance={"adversarial": attack.to_dict()})
    if reference is not None and holdout:
        cache = AttackCache(holdout, cfg.seed)
        x_ref = cache.get(reference, attack.epsilon, attack.iterations)
        x_rob = cache.get(robust, attack.epsilon, attack.iterations)
        ref_acc = reference.accuracy(x_ref, cache.labels)
        rob_acc = robust.accuracy(x_rob, cache.labels)
        robustness = {
            "epsilon": attack.epsilon,
            "robust_accuracy": rob_acc,
            "reference_robust_accuracy": ref_acc,
            "gain": rob_acc - ref_acc,
            "required_gain": ROBUST_GAIN,
            "meets_required_gain": rob_acc - ref_acc >= ROBUST_GAIN,
        }
        report.extra.update({"robust_accuracy": rob_acc, "reference_robust_accuracy": ref_acc,
                             "robustness": robustness})
        robust.provenance["robustness"] = robustness
        logger.info(f"Robust accuracy at ε={attack.epsilon:g}: adversarial {rob_acc:.3f}, "
                    f"clean-trained {ref_acc:.3f}")
        if not robustness["meets_required_gain"]:
            logger.warning(f"Adversarial training gained {rob_acc - ref_acc:+.3f} robust accuracy, "
                           f"short of the required {ROBUST_GAIN:+.2f}")
    return robust, report


@dataclass
class CombinationStudy:
    """Grid {denoiser} × {classifier} over the main sweep plus the fixed-ε varying-n block."""
    results: dict[tuple[str, str], SweepResult]
    iteration_grid: tuple[int, ...]
    iteration_epsilon: float
    iteration_sweep: tuple[int, ...]

    def iteration_block(self) -> pd.DataFrame:
        rows = []
        for (pipeline, label), result in self.results.items():
            for n in self.iteration_sweep:
                rows.append({
                    "pipeline": pipeline,
                    "classifier": label,
                    "iterations": n,
                    "accuracy": result.accuracy_at(self.iteration_epsilon, n),
                })
        return pd.DataFrame(rows)


def combination_study(
    denoisers: dict[str, tuple[Denoiser | None, str | None]],
    classifiers: dict[str, ThreatModel],
    sweep: SweepSpec,
    cache: AttackCache,
    iteration_epsilon: float = 0.3,
    iteration_sweep: Sequence[int] = (10, 30, 50, 70, 90),
) -> CombinationStudy:
    """Every denoiser in front of every classifier; each classifier is attacked directly."""
    extended = SweepSpec(
        epsilon_grid=sweep.epsilon_grid,
        iteration_grid=sweep.iteration_grid,
        images_per_cell=sweep.images_per_cell,
        extra_cells=tuple((iteration_epsilon, int(n)) for n in iteration_sweep),
    )
    results: dict[tuple[str, str], SweepResult] = {}
    for label, classifier in classifiers.items():
        for name, (denoiser, variant) in denoisers.items():
            pipe = PipelineSpec(name, classifier, denoiser, variant, classifier_label=label)
            results[(name, label)] = evaluate_pipeline(pipe, extended, cache)
    return CombinationStudy(
        results,
        tuple(sweep.iteration_grid),
        epsilon_key(iteration_epsilon),
        tuple(int(n) for n in iteration_sweep),
    )


def uncertainty_statistics(
    denoiser: Denoiser,
    attacker: ThreatModel,
    cache: AttackCache,
    epsilons: Sequence[float],
    n: int,
    variant: str | None = None,
    images: int | None = None,
    batch_size: int = 64,
) -> pd.DataFrame:
    """Per-image mean uncertainty (and fusion weight for the Y-Net) for each strength."""
    rows = []
    count = images or len(cache)
    device = attacker.device
    denoiser.eval().to(device)
    with torch.no_grad():
        for eps in epsilons:
            adv = cache.get(attacker, eps, n)[:count]
            for start in range(0, len(adv), batch_size):
                _, stats = kernel_statistics(denoiser, variant, adv[start:start + batch_size].to(device))
                if not stats:
                    raise ConfigError(f"{denoiser.arch} has no kernel field to measure")
                columns = {k: v.cpu().numpy() for k, v in stats.items()}
                for i in range(len(next(iter(columns.values())))):
                    rows.append({"epsilon": epsilon_key(eps), "image": start + i,
                                 **{k: float(v[i]) for k, v in columns.items()}})
    return pd.DataFrame(rows)


def spearman(frame: pd.DataFrame, column: str = "mean_uncertainty") -> float:
    """Spearman rank correlation between ε and ``column``."""
    if frame.empty or frame["epsilon"].nunique() < 2:
        return float("nan")
    return float(frame[["epsilon", column]].corr(method="spearman").iloc[0, 1])
