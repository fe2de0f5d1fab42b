"""
Acceptance checklist.

Criteria 1-2 are operator-level: quick brute-force oracles for the filter,
uncertainty, fusion, metrics and L1 loss, and a finite-difference check of
the filter gradient. Criteria 3-11 are read off sweep results, the
combination study, the uncertainty statistics and the training reports of a
finished run. A criterion whose inputs are missing is reported as skipped.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import torch

from advfilter.attack import PROJECTION_TOLERANCE, AttackDataset, ThreatModel
from advfilter.config import DEFAULT_EPSILONS
from advfilter.evaluation import CombinationStudy, SweepResult, epsilon_key, spearman
from advfilter.filtering import apply_pixelwise_filter, filter_gradient, fuse, uncertainty_map
from advfilter.imaging import SSIM_C1, SSIM_C2, SSIM_WINDOW, gaussian_window, psnr, ssim
from advfilter.losses import loss_image

logger = logging.getLogger(__name__)

FILTER_TOLERANCE = 1e-6
METRIC_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-5
ORACLE_INSTANCES = 100
GRADIENT_INSTANCES = 20

MEDIAN_CHECK = (3e-3, 5e-3, 1e-2, 3e-2)
SMALL_CHECK = (0.0, 1e-4)
FILT_PIPELINES = ("filt_lsem", "filt_limg", "filt_limg_star", "advfilter_sl", "advfilter_m", "advfilter")


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool | None
    detail: str = ""
    values: dict[str, Any] = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.passed is None:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"


@dataclass
class Checklist:
    criteria: list[Criterion] = field(default_factory=list)

    def add(self, criterion: Criterion) -> Criterion:
        self.criteria.append(criterion)
        logger.info(f"[{criterion.status}] {criterion.number}. {criterion.name}: {criterion.detail}")
        return criterion

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.criteria)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"criterion": c.number, "name": c.name, "status": c.status, "detail": c.detail}
             for c in sorted(self.criteria, key=lambda c: c.number)]
        )

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frame = self.frame()
        csv_path = directory / "acceptance.csv"
        txt_path = directory / "acceptance.txt"
        frame.to_csv(csv_path, index=False)
        txt_path.write_text(frame.to_string(index=False) + "\n")
        return [csv_path, txt_path]


def _skip(number: int, name: str, reason: str) -> Criterion:
    return Criterion(number, name, None, reason)


# ---------------------------------------------------------------------------
# Criteria 1-2: operator oracles
# ---------------------------------------------------------------------------

def _reflect(i: int, n: int) -> int:
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def brute_force_filter(image: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Scalar-loop pixel-wise filtering of a C×H×W image with C·K²×H×W logits."""
    c, h, w = image.shape
    k = int(round(math.sqrt(logits.shape[0] // c)))
    pad = k // 2
    out = np.zeros_like(image)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                raw = logits[ch * k * k:(ch + 1) * k * k, y, x]
                weights = np.exp(raw - raw.max())
                weights /= weights.sum()
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        sy = _reflect(y + ky - pad, h)
                        sx = _reflect(x + kx - pad, w)
                        acc += weights[ky * k + kx] * image[ch, sy, sx]
                out[ch, y, x] = acc
    return out


def brute_force_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar-loop SSIM over valid Gaussian windows, averaged over channels and positions."""
    window = gaussian_window().numpy()
    c, h, w = a.shape
    values = []
    for ch in range(c):
        for y in range(h - SSIM_WINDOW + 1):
            for x in range(w - SSIM_WINDOW + 1):
                pa = a[ch, y:y + SSIM_WINDOW, x:x + SSIM_WINDOW]
                pb = b[ch, y:y + SSIM_WINDOW, x:x + SSIM_WINDOW]
                mu_a, mu_b = (window * pa).sum(), (window * pb).sum()
                var_a = (window * pa * pa).sum() - mu_a**2
                var_b = (window * pb * pb).sum() - mu_b**2
                cov = (window * pa * pb).sum() - mu_a * mu_b
                values.append(
                    ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                    / ((mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
                )
    return float(np.mean(values))


def check_operators(instances: int = ORACLE_INSTANCES, seed: int = 0) -> Criterion:
    """Vectorized operators against scalar oracles on random small instances."""
    rng = np.random.default_rng(seed)
    started = time.monotonic()
    worst = {"filter": 0.0, "uncertainty": 0.0, "fuse": 0.0, "psnr": 0.0, "ssim": 0.0, "l1": 0.0}
    for i in range(instances):
        k = (1, 3, 5)[i % 3]
        h, w = rng.integers(3, 7, size=2)
        h, w = max(h, k // 2 + 1), max(w, k // 2 + 1)
        image = rng.random((3, h, w))
        logits = rng.normal(scale=2.0, size=(3 * k * k, h, w))
        got = apply_pixelwise_filter(torch.from_numpy(image), torch.from_numpy(logits)).numpy()
        worst["filter"] = max(worst["filter"], float(np.abs(got - brute_force_filter(image, logits)).max()))

        u = uncertainty_map(torch.from_numpy(logits)).numpy()
        expected_u = np.array([[logits[:, y, x].max() for x in range(w)] for y in range(h)])
        worst["uncertainty"] = max(worst["uncertainty"], float(np.abs(u - expected_u).max()))

        other = rng.random((3, h, w))
        weight = rng.random((h, w))
        fused = fuse(torch.from_numpy(image), torch.from_numpy(other), torch.from_numpy(weight)).numpy()
        expected_f = weight[None] * image + (1.0 - weight[None]) * other
        worst["fuse"] = max(worst["fuse"], float(np.abs(fused - expected_f).max()))

        mse = float(np.mean((image - other) ** 2))
        expected_p = 100.0 if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)
        got_p = psnr(torch.from_numpy(image), torch.from_numpy(other))
        worst["psnr"] = max(worst["psnr"], abs(got_p - expected_p))

        expected_l1 = float(np.mean(np.abs(image - other)))
        got_l1 = float(loss_image(torch.from_numpy(image), torch.from_numpy(other)))
        worst["l1"] = max(worst["l1"], abs(got_l1 - expected_l1))

    for _ in range(max(1, instances // 10)):
        a = rng.random((3, SSIM_WINDOW + 2, SSIM_WINDOW + 1))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
        worst["ssim"] = max(worst["ssim"], abs(ssim(torch.from_numpy(a), torch.from_numpy(b))
                                               - brute_force_ssim(a, b)))

    passed = (
        worst["filter"] <= FILTER_TOLERANCE
        and worst["uncertainty"] == 0.0
        and worst["fuse"] <= FILTER_TOLERANCE
        and max(worst["psnr"], worst["ssim"], worst["l1"]) <= METRIC_TOLERANCE
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return Criterion(1, "operator oracles", passed,
                     f"{detail} ({time.monotonic() - started:.1f}s)", dict(worst))


def finite_difference_error(image: torch.Tensor, logits: torch.Tensor, step: float = 1e-6) -> float:
    """Max relative error of filter_gradient against central differences of <g, filter(x, φ)>."""
    upstream = torch.randn(image.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    grad_x, grad_phi = filter_gradient(image, logits, upstream)

    def objective(x: torch.Tensor, phi: torch.Tensor) -> float:
        return float((apply_pixelwise_filter(x, phi) * upstream).sum())

    worst = 0.0
    for tensor, analytic, is_image in ((image, grad_x, True), (logits, grad_phi, False)):
        flat = tensor.reshape(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            plus = objective(image, logits)
            flat[i] = orig - step
            minus = objective(image, logits)
            flat[i] = orig
            numeric[i] = (plus - minus) / (2 * step)
        scale = max(float(numeric.abs().max()), 1.0)
        worst = max(worst, float((analytic.reshape(-1) - numeric).abs().max()) / scale)
    return worst


def check_gradient(instances: int = GRADIENT_INSTANCES, seed: int = 0) -> Criterion:
    started = time.monotonic()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for i in range(instances):
        k = (3, 5)[i % 2]
        image = torch.rand(3, 4, 4, dtype=torch.float64, generator=gen)
        logits = torch.randn(3 * k * k, 4, 4, dtype=torch.float64, generator=gen)
        worst = max(worst, finite_difference_error(image, logits))
    return Criterion(2, "filter gradient vs finite differences", worst <= GRADIENT_TOLERANCE,
                     f"max relative error {worst:.2e} ({time.monotonic() - started:.1f}s)",
                     {"max_relative_error": worst})


# ---------------------------------------------------------------------------
# Criteria 3-11: run-level checks
# ---------------------------------------------------------------------------

def _mean_accuracy(result: SweepResult, epsilons: Sequence[float], n: int) -> float:
    return float(np.mean([result.accuracy_at(e, n) for e in epsilons]))


def _grid(result: SweepResult, n: int, lo: float, hi: float) -> list[float]:
    return [e for e in result.epsilons(n) if lo - 1e-12 <= e <= hi + 1e-12]


def _missing(results: Mapping[str, SweepResult], names: Sequence[str]) -> list[str]:
    return [name for name in names if name not in results]


def check_attack(results: Mapping[str, SweepResult], n: int,
                 dataset: AttackDataset | None = None,
                 threat: ThreatModel | None = None) -> Criterion:
    """Projection and loss ascent of every stored strength, and the undefended accuracy trend over ε."""
    name = "attack projection and accuracy trend"
    if "none" not in results:
        return _skip(3, name, "no 'none' pipeline")
    violations = 0
    no_ascent: list[float] = []
    values: dict[str, Any] = {}
    if dataset is not None:
        clean_loss = threat.mean_loss(dataset.clean, dataset.labels) if threat is not None else None
        for eps, adv in zip(dataset.epsilons, dataset.adversarial):
            delta = (adv - dataset.clean).abs().amax()
            if float(delta) > eps + PROJECTION_TOLERANCE or adv.min() < 0 or adv.max() > 1:
                violations += 1
            if clean_loss is not None and eps > 0:
                adv_loss = threat.mean_loss(adv, dataset.labels)
                values.setdefault("loss", {})[eps] = adv_loss
                if adv_loss <= clean_loss:
                    no_ascent.append(eps)
        if clean_loss is not None:
            values["clean_loss"] = clean_loss
    grid = _grid(results["none"], n, 1e-4, 5e-2)
    accs = [results["none"].accuracy_at(e, n) for e in grid]
    increases = sum(1 for a, b in zip(accs, accs[1:]) if b > a)
    passed = violations == 0 and not no_ascent and increases <= 1
    detail = (f"{violations} strengths out of bounds, {increases} accuracy increases over "
              f"{len(grid)} strengths")
    if no_ascent:
        detail += ", loss not raised at ε=" + ", ".join(f"{e:g}" for e in no_ascent)
    elif "clean_loss" in values:
        detail += ", loss raised at every strength"
    values["accuracy"] = dict(zip(grid, accs))
    return Criterion(3, name, passed, detail, values)


def check_filtering_beats_additive(results: Mapping[str, SweepResult], n: int,
                                   margin: float = 0.02) -> Criterion:
    name = "filtering beats additive"
    missing = _missing(results, ("filt_limg", "add_limg"))
    if missing:
        return _skip(4, name, f"missing {missing}")
    grid = _grid(results["filt_limg"], n, min(DEFAULT_EPSILONS), max(DEFAULT_EPSILONS))
    gap_img = _mean_accuracy(results["filt_limg"], grid, n) - _mean_accuracy(results["add_limg"], grid, n)
    passed = gap_img >= margin
    detail = f"L_img gap {gap_img:+.3f}"
    if not _missing(results, ("filt_lsem", "add_lsem")):
        gap_sem = (_mean_accuracy(results["filt_lsem"], grid, n)
                   - _mean_accuracy(results["add_lsem"], grid, n))
        passed = passed and gap_sem > 0
        detail += f", L_sem gap {gap_sem:+.3f}"
    return Criterion(4, name, passed, detail)


def check_superior_specialization(results: Mapping[str, SweepResult], n: int,
                                  margin: float = 0.05) -> Criterion:
    name = "superior-strength specialization"
    missing = _missing(results, ("filt_limg_star", "filt_limg"))
    if missing:
        return _skip(5, name, f"missing {missing}")
    star, base = results["filt_limg_star"], results["filt_limg"]
    median = [e for e in MEDIAN_CHECK if epsilon_key(e) in star.epsilons(n)]
    small = [e for e in SMALL_CHECK if epsilon_key(e) in star.epsilons(n)]
    if not median or not small:
        return _skip(5, name, "sweep does not cover the checked strengths")
    gain = _mean_accuracy(star, median, n) - _mean_accuracy(base, median, n)
    losses = {e: base.accuracy_at(e, n) - star.accuracy_at(e, n) for e in small}
    passed = gain >= margin and all(v >= margin for v in losses.values())
    detail = f"median gain {gain:+.3f}, small-strength loss " + ", ".join(
        f"ε={e:g}: {v:+.3f}" for e, v in losses.items())
    return Criterion(5, name, passed, detail)


def check_fusion(results: Mapping[str, SweepResult], n: int) -> Criterion:
    name = "uncertainty-aware fusion"
    missing = _missing(results, ("advfilter", "filt_limg"))
    if missing:
        return _skip(6, name, f"missing {missing}")
    fused, base = results["advfilter"], results["filt_limg"]
    low = _grid(fused, n, 0.0, 1e-3)
    median = _grid(fused, n, 1e-3, 1e-2)
    worst_low = min((fused.accuracy_at(e, n) - base.accuracy_at(e, n) for e in low), default=0.0)
    gain = _mean_accuracy(fused, median, n) - _mean_accuracy(base, median, n) if median else float("nan")
    passed = worst_low >= -0.01 and gain >= 0.05
    detail = f"worst small-ε gap {worst_low:+.3f}, median gain {gain:+.3f}"
    if not _missing(results, ("advfilter_sl", "advfilter_m")):
        grid = fused.epsilons(n)
        wins = sum(
            1 for e in grid
            if fused.accuracy_at(e, n) >= max(results["advfilter_sl"].accuracy_at(e, n),
                                              results["advfilter_m"].accuracy_at(e, n)) - 0.02
        )
        needed = math.ceil(len(grid) * 10 / 13)
        passed = passed and wins >= needed
        detail += f", fused ≥ best branch at {wins}/{len(grid)} strengths (need {needed})"
    return Criterion(6, name, passed, detail)


def check_clean_accuracy(results: Mapping[str, SweepResult], n: int) -> Criterion:
    name = "clean-accuracy preservation"
    if "none" not in results or 0.0 not in results["none"].epsilons(n):
        return _skip(7, name, "no undefended ε=0 cell")
    reference = results["none"].accuracy_at(0.0, n)
    drops = {p: reference - results[p].accuracy_at(0.0, n) for p in FILT_PIPELINES if p in results}
    if not drops:
        return _skip(7, name, "no filtering pipelines")
    worst = max(drops, key=drops.get)
    return Criterion(7, name, drops[worst] <= 0.01,
                     f"undefended {reference:.3f}, largest drop {drops[worst]:+.3f} ({worst})", drops)


def check_quality(results: Mapping[str, SweepResult], threshold: float = 1e-2) -> Criterion:
    name = "image quality"
    missing = _missing(results, ("filt_limg", "add_limg"))
    if missing:
        return _skip(8, name, f"missing {missing}")
    strengths = sorted(e for e in results["filt_limg"].quality if e >= threshold)
    if not strengths:
        return _skip(8, name, f"no quality measured at ε ≥ {threshold:g}")
    filt_wins = all(
        results["filt_limg"].quality[e].psnr >= results["add_limg"].quality[e].psnr
        for e in strengths if e in results["add_limg"].quality
    )
    regressions = [
        f"{p}@{e:g}"
        for p, r in results.items() if p != "none"
        for e in strengths if e in r.quality and r.quality[e].psnr <= r.input_quality[e].psnr
    ]
    return Criterion(8, name, filt_wins and not regressions,
                     f"Filt ≥ Add PSNR: {filt_wins}; no improvement over input: {regressions or 'none'}")


def check_combination(study: CombinationStudy | None, robust_label: str = "adversarial",
                      margin: float = 0.05, spread: float = 0.05) -> Criterion:
    name = "combination with adversarial training"
    if study is None:
        return _skip(9, name, "no combination study")
    n = study.iteration_grid[0]
    baseline = study.results.get(("none", robust_label))
    if baseline is None:
        return _skip(9, name, f"no undefended {robust_label} classifier")
    top = baseline.epsilons(n)[-2:]
    gains = {}
    for pipeline in ("filt_limg", "advfilter"):
        result = study.results.get((pipeline, robust_label))
        if result is not None:
            gains[pipeline] = min(result.accuracy_at(e, n) - baseline.accuracy_at(e, n) for e in top)
    block = study.iteration_block()
    spreads = block.groupby(["pipeline", "classifier"])["accuracy"].agg(lambda s: s.max() - s.min())
    passed = bool(gains) and all(g >= margin for g in gains.values()) and bool((spreads <= spread).all())
    detail = ", ".join(f"{p} {g:+.3f}" for p, g in gains.items())
    detail = f"gain at top strengths: {detail}; max n-spread {spreads.max():.3f}"
    robustness = baseline.provenance.get("classifier_robustness")
    if robustness and not robustness.get("meets_required_gain", True):
        passed = False
        detail += (f"; {robust_label} classifier gained only {robustness['gain']:+.3f} "
                   f"robust accuracy (need {robustness['required_gain']:+.2f})")
    return Criterion(9, name, passed, detail)


def check_uncertainty(frame: pd.DataFrame | None, column: str = "mean_uncertainty",
                      threshold: float = 0.5) -> Criterion:
    name = "uncertainty grows with strength"
    if frame is None or frame.empty or column not in frame:
        return _skip(10, name, "no uncertainty statistics")
    rho = spearman(frame, column)
    return Criterion(10, name, rho >= threshold, f"Spearman ρ = {rho:.3f}", {"rho": rho})


def check_protocol(reports: Mapping[str, Mapping[str, Any]], elapsed: float | None = None,
                   budget: float | None = None) -> Criterion:
    """Freeze, routing counters and (for timed runs) the wall-clock budget."""
    name = "protocol invariants"
    problems: list[str] = []
    stage1, stage2 = reports.get("advfilter_stage1"), reports.get("advfilter")
    if stage1 and stage2:
        if stage1.get("ynet_fingerprint") != stage2.get("ynet_fingerprint"):
            problems.append("Y-Net changed during fusion training")
    for key in ("multihead", "advfilter_stage1"):
        report = reports.get(key)
        if report and "expected_update_counts" in report:
            if dict(report["update_counts"]) != dict(report["expected_update_counts"]):
                problems.append(f"{key} update counters {report['update_counts']} != "
                                f"{report['expected_update_counts']}")
    if elapsed is not None and budget is not None and elapsed > budget:
        problems.append(f"run took {elapsed:.0f}s > {budget:.0f}s")
    if not reports and elapsed is None:
        return _skip(11, name, "no training reports")
    return Criterion(11, name, not problems, "; ".join(problems) or "ok")


def evaluate_acceptance(
    results: Sequence[SweepResult],
    n: int,
    combination: CombinationStudy | None = None,
    uncertainty: pd.DataFrame | None = None,
    reports: Mapping[str, Mapping[str, Any]] | None = None,
    attack_data: AttackDataset | None = None,
    threat: ThreatModel | None = None,
    elapsed: float | None = None,
    budget: float | None = None,
    oracles: bool = True,
) -> Checklist:
    """Run every criterion that the given inputs allow."""
    by_name = {r.pipeline: r for r in results if r.classifier == "clean"}
    checklist = Checklist()
    if oracles:
        checklist.add(check_operators())
        checklist.add(check_gradient())
    checklist.add(check_attack(by_name, n, attack_data, threat))
    checklist.add(check_filtering_beats_additive(by_name, n))
    checklist.add(check_superior_specialization(by_name, n))
    checklist.add(check_fusion(by_name, n))
    checklist.add(check_clean_accuracy(by_name, n))
    checklist.add(check_quality(by_name))
    checklist.add(check_combination(combination))
    checklist.add(check_uncertainty(uncertainty))
    checklist.add(check_protocol(reports or {}, elapsed, budget))
    return checklist
