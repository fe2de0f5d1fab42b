"""
Report bundle rendering.

    report/
      tables/*.csv, tables/*.txt     accuracy / quality tables, one row per pipeline
      plots/*.png                    accuracy vs log ε
      figures/uncertainty/*.png      attacked image and uncertainty map per strength
      figures/kernels/*.png          per-pixel kernels of one image
      manifest.json                  files plus the provenance of every result
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402

from advfilter.attack import ThreatModel  # noqa: E402
from advfilter.errors import ShapeError  # noqa: E402
from advfilter.evaluation import AttackCache, CombinationStudy, SweepResult, spearman  # noqa: E402
from advfilter.filtering import normalized_kernels, uncertainty_map  # noqa: E402
from advfilter.imaging import to_array  # noqa: E402
from advfilter.models import Denoiser, FilteringDenoiser, MultiHeadDenoiser, YNetDenoiser  # noqa: E402
from advfilter.models.base import pad_to_multiple  # noqa: E402

logger = logging.getLogger(__name__)

PIPELINE_LABELS = {
    "none": "Acc. after Attack",
    "add_lsem": "Add(L_sem)",
    "filt_lsem": "Filt(L_sem)",
    "add_limg": "Add(L_img)",
    "filt_limg": "Filt(L_img)",
    "filt_limg_star": "Filt(L*_img)",
    "multihead_h1": "Multi-head h1",
    "multihead_h2": "Multi-head h2",
    "multihead_h3": "Multi-head h3",
    "multihead_h4": "Multi-head h4",
    "advfilter_sl": "PA-Filt(L_img)_sl",
    "advfilter_m": "PA-Filt(L_img)_m",
    "advfilter": "PA-Filt",
}
PIPELINE_ORDER = tuple(PIPELINE_LABELS)


def label_of(pipeline: str) -> str:
    return PIPELINE_LABELS.get(pipeline, pipeline)


def _ordered(results: Sequence[SweepResult]) -> list[SweepResult]:
    rank = {name: i for i, name in enumerate(PIPELINE_ORDER)}
    return sorted(results, key=lambda r: (r.classifier, rank.get(r.pipeline, len(rank))))


def _eps_column(eps: float) -> str:
    return f"{eps:g}"


def accuracy_table(results: Sequence[SweepResult], n: int) -> pd.DataFrame:
    """Rows: pipelines in report order; columns: ε; cells: accuracy under PGD(n, ε)."""
    rows = {}
    epsilons = sorted({e for r in results for e in r.epsilons(n)})
    for result in _ordered(results):
        label = label_of(result.pipeline)
        if result.classifier != "clean":
            label = f"{label} [{result.classifier}]"
        rows[label] = {
            _eps_column(e): cell.accuracy
            for (e, cell_n), cell in result.accuracy.items()
            if cell_n == n
        }
    table = pd.DataFrame.from_dict(rows, orient="index")
    table = table.reindex(columns=[_eps_column(e) for e in epsilons])
    table.index.name = "pipeline"
    return table


def quality_table(results: Sequence[SweepResult], metric: str) -> pd.DataFrame:
    """PSNR or SSIM of denoised vs clean per ε; the attacked input is the 'none' row."""
    rows = {}
    for result in _ordered(results):
        if result.classifier != "clean":
            continue
        source = result.input_quality if result.pipeline == "none" else result.quality
        rows[label_of(result.pipeline)] = {
            _eps_column(e): getattr(q, metric) for e, q in sorted(source.items())
        }
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "pipeline"
    return table


def statistics_table(results: Sequence[SweepResult]) -> pd.DataFrame:
    """Mean uncertainty / fusion weight per ε for pipelines with a kernel field."""
    frames = []
    for result in _ordered(results):
        for eps, stats in sorted(result.statistics.items()):
            if stats:
                frames.append({"pipeline": label_of(result.pipeline), "epsilon": eps, **stats})
    return pd.DataFrame(frames)


def write_table(table: pd.DataFrame, directory: Path, stem: str, title: str | None = None) -> list[Path]:
    """Write ``stem.csv`` and an aligned plain-text ``stem.txt``."""
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    txt_path = directory / f"{stem}.txt"
    table.to_csv(csv_path)
    text = table.to_string(float_format=lambda v: f"{v:.3f}")
    txt_path.write_text(f"{title}\n\n{text}\n" if title else f"{text}\n")
    return [csv_path, txt_path]


def plot_accuracy(table: pd.DataFrame, path: Path, title: str) -> Path:
    """Accuracy vs log ε, one line per pipeline; the clean cell is drawn as a dashed level."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    eps = np.array([float(c) for c in table.columns])
    attacked = eps > 0
    for label, row in table.iterrows():
        values = row.to_numpy(dtype=float)
        line, = ax.plot(eps[attacked], values[attacked], marker="o", label=label)
        if (~attacked).any() and np.isfinite(values[~attacked]).all():
            ax.axhline(values[~attacked][0], color=line.get_color(), linestyle="--", alpha=0.3)
    ax.set_xscale("log")
    ax.set_ylim(0, 1)
    ax.set_xlabel("ε")
    ax.set_ylabel("top-1 accuracy")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_uncertainty_strip(
    columns: Sequence[tuple[float, np.ndarray, np.ndarray]], path: Path, title: str = ""
) -> pd.DataFrame:
    """
    Attacked image (top) and uncertainty map (bottom) per strength, with the
    map mean in the column title. Returns the per-ε mean table.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(2, len(columns), figsize=(1.6 * len(columns), 3.4), squeeze=False)
    vmin = min(float(u.min()) for _, _, u in columns)
    vmax = max(float(u.max()) for _, _, u in columns)
    means = []
    for j, (eps, image, u_map) in enumerate(columns):
        mean = float(u_map.mean())
        means.append({"epsilon": eps, "mean_uncertainty": mean})
        axes[0, j].imshow(image)
        axes[0, j].set_title(f"ε={eps:g}", fontsize=7)
        axes[1, j].imshow(u_map, cmap="viridis", vmin=vmin, vmax=vmax)
        axes[1, j].set_title(f"mean {mean:.2f}", fontsize=7)
        for ax in axes[:, j]:
            ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return pd.DataFrame(means)


def plot_kernels(
    image: np.ndarray, kernels: np.ndarray, pixels: Sequence[tuple[int, int]], path: Path
) -> Path:
    """
    The image with marked pixels, and each marked pixel's normalized K×K kernels
    (one per channel).

    Args:
        image: H×W×3 uint8.
        kernels: 3×K×K×H×W normalized kernels.
        pixels: (row, col) positions to show.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(len(pixels), 4, figsize=(6, 1.6 * len(pixels)), squeeze=False)
    for i, (r, c) in enumerate(pixels):
        axes[i, 0].imshow(image)
        axes[i, 0].plot([c], [r], marker="s", color="red", markersize=4)
        axes[i, 0].set_title(f"({r}, {c})", fontsize=7)
        for ch, name in enumerate("RGB"):
            kernel = kernels[ch, :, :, r, c]
            axes[i, ch + 1].imshow(kernel, cmap="magma", vmin=0.0, vmax=1.0)
            axes[i, ch + 1].set_title(f"{name} center {kernel[kernel.shape[0] // 2, kernel.shape[1] // 2]:.2f}",
                                      fontsize=7)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def kernel_logits(denoiser: Denoiser, image: torch.Tensor, variant: str | None = None) -> torch.Tensor:
    """Raw 3K²×H×W kernel logits the denoiser predicts for one 3×H×W image."""
    x, h, w = pad_to_multiple(image.unsqueeze(0))
    with torch.no_grad():
        if isinstance(denoiser, YNetDenoiser):
            logits = denoiser.forward_branch(x, variant if variant in ("sl", "m") else "sl")
        elif isinstance(denoiser, MultiHeadDenoiser):
            logits = denoiser(x, int((variant or "head_1").split("_")[1]))
        elif isinstance(denoiser, FilteringDenoiser):
            logits = denoiser(x)
        else:
            raise ShapeError(f"{denoiser.arch} predicts no kernels")
    return logits[0, :, :h, :w]


def collect_uncertainty_strip(
    denoiser: Denoiser,
    attacker: ThreatModel,
    cache: AttackCache,
    epsilons: Sequence[float],
    n: int,
    index: int = 0,
    variant: str | None = None,
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """(ε, attacked image, uncertainty map) for test image ``index`` at each strength."""
    columns = []
    device = attacker.device
    denoiser.eval().to(device)
    for eps in epsilons:
        adv = cache.get(attacker, eps, n)[index]
        logits = kernel_logits(denoiser, adv.to(device), variant)
        columns.append((eps, to_array(adv), uncertainty_map(logits).cpu().numpy()))
    return columns


def render_kernel_figure(
    denoiser: Denoiser, image: torch.Tensor, path: Path, variant: str | None = None,
    pixels: Sequence[tuple[int, int]] | None = None,
) -> Path:
    """Kernel inspection figure for one image; default pixels are the lowest/highest uncertainty ones."""
    device = next(denoiser.parameters()).device
    logits = kernel_logits(denoiser, image.to(device), variant).cpu()
    if pixels is None:
        u = uncertainty_map(logits)
        w = u.shape[-1]
        lo, hi = int(u.argmin()), int(u.argmax())
        pixels = [(lo // w, lo % w), (hi // w, hi % w)]
    return plot_kernels(to_array(image), normalized_kernels(logits).numpy(), pixels, path)


def robustness_warnings(results: Sequence[SweepResult]) -> list[str]:
    """One line per classifier whose adversarial training fell short of the required gain."""
    warnings: dict[str, str] = {}
    for r in results:
        rob = r.provenance.get("classifier_robustness")
        if rob and not rob.get("meets_required_gain", True) and r.classifier not in warnings:
            warnings[r.classifier] = (
                f"{r.classifier} classifier: robust accuracy at ε={rob['epsilon']:g} improved by "
                f"{rob['gain']:+.3f}, short of the required {rob['required_gain']:+.2f}"
            )
    return list(warnings.values())


def render_report(
    results: Sequence[SweepResult],
    out_dir: str | Path,
    combination: CombinationStudy | None = None,
    uncertainty: dict[str, pd.DataFrame] | None = None,
    extra_figures: Sequence[Path] = (),
) -> Path:
    """
    Write the report bundle for a set of sweep results.

    Returns:
        Path of the bundle's manifest.json.
    """
    root = Path(out_dir)
    tables, plots = root / "tables", root / "plots"
    written: list[Path] = []
    if not results:
        raise ValueError("render_report needs at least one result")

    iterations = sorted({n for r in results for n in r.iterations()})
    main_results = [r for r in results if r.classifier == "clean"] or list(results)
    for n in iterations:
        table = accuracy_table(main_results, n)
        if table.empty or table.isna().all().all():
            continue
        written += write_table(table, tables, f"accuracy_n{n}", f"Top-1 accuracy under PGD(n={n}, ε)")
        written.append(plot_accuracy(table, plots / f"accuracy_n{n}.png", f"PGD n={n}"))

    if any(r.quality for r in results):
        for metric in ("psnr", "ssim"):
            written += write_table(quality_table(results, metric), tables, metric,
                                   f"{metric.upper()} against the clean image (single-scale SSIM)")
    stats = statistics_table(results)
    if not stats.empty:
        written += write_table(stats.set_index(["pipeline", "epsilon"]), tables, "kernel_statistics")

    cells = pd.concat([r.frame() for r in results], ignore_index=True)
    cells_path = tables / "cells.csv"
    cells.to_csv(cells_path, index=False)
    written.append(cells_path)

    if combination is not None:
        combo = list(combination.results.values())
        grid = accuracy_table(combo, combination.iteration_grid[0])
        written += write_table(grid, tables, "combination", "Denoiser + classifier combinations")
        written.append(plot_accuracy(grid, plots / "combination.png", "Combination study"))
        block = combination.iteration_block().pivot_table(
            index=["pipeline", "classifier"], columns="iterations", values="accuracy"
        )
        block.columns = [f"n={n}" for n in block.columns]
        written += write_table(block, tables, "combination_iterations",
                               f"PGD(n, ε={combination.iteration_epsilon:g})")

    summary: dict[str, float] = {}
    for name, frame in (uncertainty or {}).items():
        path = tables / f"uncertainty_{name}.csv"
        frame.to_csv(path, index=False)
        written.append(path)
        if "mean_uncertainty" in frame and frame["epsilon"].nunique() > 1:
            summary[name] = spearman(frame)

    combo_results = list(combination.results.values()) if combination is not None else []
    warnings = robustness_warnings(list(results) + combo_results)
    for line in warnings:
        logger.warning(line)

    written += list(extra_figures)
    manifest = {
        "files": sorted(str(p.relative_to(root)) for p in written if p.is_relative_to(root)),
        "results": [r.provenance for r in results],
        "uncertainty_spearman": summary,
        "warnings": warnings,
        "notes": {
            "ssim": "single-scale SSIM, 11x11 Gaussian window, sigma 1.5",
            "uncertainty": "per-pixel max over raw (pre-softmax) kernel logits",
        },
    }
    manifest_path = root / "manifest.json"
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str))
    logger.info(f"Report written to {root} ({len(written)} files)")
    return manifest_path
