"""
Training protocols.

- train_classifier: clean (or PGD-adversarial) training of the threat classifier
- train_denoiser: one u_add/u_filt denoiser under L_img or L_sem
- train_multihead: four heads, each updated only by batches from its strength domain
- train_advfilter_stage1: Y-Net, decoder_sl on every strength, decoder_m on the large ones
- train_advfilter_stage2: fusion network only, Y-Net frozen

Denoiser batches are homogeneous in strength. Routing works by leaving the
gradients of unrouted parameter groups at None, which Adam skips.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from advfilter.attack import AttackDataset, AttackSpec, ThreatModel, batch_generator, pgd_perturb
from advfilter.config import DEFAULT_EPSILONS, SUPERIOR_EPSILONS, TrainConfig
from advfilter.errors import ConfigError, FreezeViolation, RoutingError, ShapeError, TrainingDiverged
from advfilter.filtering import fuse
from advfilter.imaging import LabeledImage, stack_images
from advfilter.losses import LossSpec, compute_loss, fusion_ce, loss_image
from advfilter.models import (
    AdditiveDenoiser,
    Denoiser,
    FilteringDenoiser,
    MultiHeadDenoiser,
    YNetDenoiser,
    fingerprint_state,
)

logger = logging.getLogger(__name__)

RESUME_FILE = "resume.pt"

# head_i <- {1e(i-5), 3e(i-5), 5e(i-5)}
MULTIHEAD_DOMAINS: dict[str, tuple[float, ...]] = {
    f"head_{i}": tuple(float(f"{c}e{i - 5}") for c in (1, 3, 5)) for i in range(1, 5)
}
YNET_DOMAINS: dict[str, tuple[float, ...]] = {
    "sl": DEFAULT_EPSILONS,
    "m": SUPERIOR_EPSILONS,
}
# ε = 0 goes to the smallest-strength domain
CLEAN_ROUTES = {"u_multihead": "head_1", "y_dual": "sl"}


def _same_eps(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 + 1e-6 * abs(b)


@dataclass
class TrainReport:
    """Outcome of one training run."""
    name: str
    epoch_losses: dict[str, list[float]] = field(default_factory=dict)
    fingerprint: str = ""
    wall_clock: float = 0.0
    steps: int = 0
    update_counts: dict[str, int] = field(default_factory=dict)
    log_rows: list[dict[str, Any]] = field(default_factory=list)
    descent_ok: bool = True
    extra: dict[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log_rows, columns=["step", "epoch", "group", "loss", "lr"])

    def write_metrics(self, path: str | Path) -> None:
        """CSV metrics log: step, epoch, group, loss, lr."""
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "epoch_losses": self.epoch_losses,
            "fingerprint": self.fingerprint,
            "wall_clock": self.wall_clock,
            "steps": self.steps,
            "update_counts": self.update_counts,
            "descent_ok": self.descent_ok,
            **self.extra,
        }


@dataclass
class PairBatch:
    """A strength-homogeneous batch of (clean, attacked) images."""
    epsilon: float
    clean: torch.Tensor
    adversarial: torch.Tensor
    labels: torch.Tensor
    indices: torch.Tensor

    def to(self, device: torch.device) -> PairBatch:
        return PairBatch(
            self.epsilon,
            self.clean.to(device),
            self.adversarial.to(device),
            self.labels.to(device),
            self.indices,
        )


class EpsilonStratifiedBatches:
    """
    Per-epoch batch plans over an AttackDataset.

    Every stratum (each attack strength, plus ε=0 when clean images are
    included) contributes ceil(N / batch_size) batches per epoch; the clean
    stratum uses every clean image once. The plan for epoch e depends only on
    (seed, e).
    """

    def __init__(
        self,
        data: AttackDataset,
        batch_size: int,
        include_clean: bool = True,
        seed: int = 0,
        epsilons: Sequence[float] | None = None,
    ):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        try:
            self.data = data.subset(epsilons) if epsilons is not None else data
        except KeyError as e:
            raise ConfigError(f"Training strengths not in the attack dataset: {e}") from e
        self.batch_size = batch_size
        self.seed = seed
        strata = list(self.data.epsilons)
        if include_clean and not any(e == 0.0 for e in strata):
            strata.append(0.0)
        self.strata = tuple(strata)
        if self.data.num_images == 0:
            raise ConfigError("Training set is empty")

    @property
    def batches_per_stratum(self) -> int:
        return math.ceil(self.data.num_images / self.batch_size)

    def __len__(self) -> int:
        return self.batches_per_stratum * len(self.strata)

    def epoch(self, epoch: int) -> Iterator[PairBatch]:
        rng = np.random.default_rng([self.seed, epoch])
        plan: list[tuple[float, np.ndarray]] = []
        for eps in self.strata:
            perm = rng.permutation(self.data.num_images)
            for start in range(0, len(perm), self.batch_size):
                plan.append((eps, perm[start:start + self.batch_size]))
        for i in rng.permutation(len(plan)):
            eps, idx = plan[i]
            index = torch.from_numpy(np.sort(idx))
            clean = self.data.clean[index]
            adversarial = clean if eps == 0.0 else self.data.stack(eps)[index]
            yield PairBatch(eps, clean, adversarial, self.data.labels[index], index)


def route_epsilon(
    epsilon: float, domains: dict[str, Sequence[float]], clean_route: str | None = None
) -> list[str]:
    """Parameter groups whose strength domain contains ``epsilon``."""
    if epsilon == 0.0 and clean_route is not None:
        return [clean_route]
    routed = [name for name, eps_set in domains.items() if any(_same_eps(epsilon, e) for e in eps_set)]
    if not routed:
        raise RoutingError(f"ε={epsilon} belongs to no domain ({', '.join(domains)})")
    return routed


def _check_domains(
    domains: dict[str, Sequence[float]], allowed: Iterable[str], strata: Sequence[float],
    clean_route: str,
) -> None:
    allowed = set(allowed)
    unknown = set(domains) - allowed
    if unknown:
        raise ConfigError(f"Domains reference unknown parameter groups: {sorted(unknown)}")
    for eps in strata:
        route_epsilon(eps, domains, clean_route)


def expected_update_counts(
    strata: Sequence[float],
    batches_per_stratum: int,
    epochs: int,
    domains: dict[str, Sequence[float]],
    clean_route: str,
    groups: Iterable[str],
    shared: Sequence[str],
    route_groups: dict[str, Sequence[str]] | None = None,
) -> dict[str, int]:
    """
    Optimizer steps each parameter group should receive under strength routing:
    shared groups on every batch, routed groups only on batches from their domain.
    """
    counts = {g: 0 for g in groups}
    for eps in strata:
        touched = set(shared)
        for route in route_epsilon(eps, domains, clean_route):
            touched.update((route_groups or {}).get(route, (route,)))
        for g in touched:
            counts[g] = counts.get(g, 0) + batches_per_stratum * epochs
    return counts


def _smoothed_descent(losses: Sequence[float], window: int) -> bool:
    """Whether the smoothed loss at the end of an epoch is below the one at its start."""
    if len(losses) < 2:
        return True
    window = max(1, min(window, len(losses) // 2))
    return float(np.mean(losses[-window:])) < float(np.mean(losses[:window]))


def _progress_enabled() -> bool:
    return logger.isEnabledFor(logging.INFO)


def _fit(
    name: str,
    model: nn.Module,
    params: list[nn.Parameter],
    group_of: dict[int, str],
    batches_for_epoch: Callable[[int], Iterable[Any]],
    num_batches: int,
    step_fn: Callable[[Any], torch.Tensor],
    cfg: TrainConfig,
    resume_dir: Path | None = None,
) -> TrainReport:
    """
    Shared optimisation loop: Adam, optional cosine schedule, global-norm
    clipping, NaN abort, per-group update counters and per-epoch resume state.
    """
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = None
    if cfg.scheduler == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(1, cfg.epochs * num_batches)
        )

    report = TrainReport(name=name)
    groups = sorted(set(group_of.values()))
    report.update_counts = {g: 0 for g in groups}
    report.epoch_losses = {g: [] for g in groups}
    start_epoch = 0
    elapsed = 0.0

    resume_path = resume_dir / RESUME_FILE if resume_dir else None
    recipe = {"name": name, "train": cfg.to_dict()}
    if resume_path is not None and resume_path.exists():
        state = torch.load(resume_path, map_location="cpu", weights_only=False)
        if state.get("recipe") == recipe:
            model.load_state_dict(state["model"])
            optimizer.load_state_dict(state["optimizer"])
            if scheduler is not None and state.get("scheduler"):
                scheduler.load_state_dict(state["scheduler"])
            report = state["report"]
            start_epoch = state["epoch"] + 1
            elapsed = report.wall_clock
            logger.info(f"{name}: resuming after epoch {start_epoch}")
        else:
            logger.warning(f"{name}: ignoring {resume_path} written for a different recipe")

    last_good = copy.deepcopy(model.state_dict())
    started = time.monotonic()
    model.train()

    for epoch in range(start_epoch, cfg.epochs):
        group_losses: dict[str, list[float]] = {g: [] for g in groups}
        epoch_series: list[float] = []
        iterator = tqdm(batches_for_epoch(epoch), total=num_batches, desc=f"{name} {epoch + 1}/{cfg.epochs}",
                        leave=False, disable=not _progress_enabled())
        for batch in iterator:
            optimizer.zero_grad(set_to_none=True)
            loss = step_fn(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{name}: non-finite loss at step {report.steps + 1} (epoch {epoch + 1})",
                    last_good_state=last_good,
                )
            loss.backward()
            live = [p for p in params if p.grad is not None]
            if cfg.grad_clip > 0 and live:
                nn.utils.clip_grad_norm_(live, cfg.grad_clip)
            optimizer.step()
            lr = optimizer.param_groups[0]["lr"]
            if scheduler is not None:
                scheduler.step()

            report.steps += 1
            touched = sorted({group_of[id(p)] for p in live})
            for g in touched:
                report.update_counts[g] += 1
                group_losses[g].append(value)
                report.log_rows.append(
                    {"step": report.steps, "epoch": epoch + 1, "group": g, "loss": value, "lr": lr}
                )
            epoch_series.append(value)
            iterator.set_postfix(loss=f"{value:.4f}")

        for g in groups:
            series = group_losses[g]
            report.epoch_losses[g].append(float(np.mean(series)) if series else float("nan"))
        if not _smoothed_descent(epoch_series, cfg.smoothing_window):
            report.descent_ok = False
            logger.warning(f"{name}: smoothed loss did not decrease during epoch {epoch + 1}")
        summary = ", ".join(
            f"{g}={report.epoch_losses[g][-1]:.4f}" for g in groups if group_losses[g]
        )
        logger.info(f"{name} epoch {epoch + 1}/{cfg.epochs}: {summary}")

        last_good = copy.deepcopy(model.state_dict())
        report.wall_clock = elapsed + time.monotonic() - started
        if resume_path is not None:
            resume_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = resume_path.with_suffix(".tmp")
            torch.save(
                {
                    "recipe": recipe,
                    "epoch": epoch,
                    "model": last_good,
                    "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict() if scheduler is not None else None,
                    "report": report,
                },
                tmp,
            )
            tmp.replace(resume_path)

    model.eval()
    report.wall_clock = elapsed + time.monotonic() - started
    report.fingerprint = fingerprint_state(model.state_dict())
    if resume_path is not None and resume_path.exists():
        resume_path.unlink()
    return report


def train_classifier(
    network: nn.Module,
    images: Sequence[LabeledImage],
    cfg: TrainConfig,
    device: torch.device | str = "cpu",
    adversarial: AttackSpec | None = None,
    name: str = "classifier",
    resume_dir: Path | None = None,
) -> TrainReport:
    """
    Cross-entropy training of a classifier. With ``adversarial`` set, every
    batch is replaced by its PGD attack against the current weights.
    """
    device = torch.device(device)
    x, y = stack_images(images)
    network.to(device)
    network.requires_grad_(True)
    params = list(network.parameters())
    group_of = {id(p): "classifier" for p in params}
    num_batches = math.ceil(len(x) / cfg.batch_size)

    def batches(epoch: int) -> Iterator[tuple[int, torch.Tensor]]:
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        for b_idx, start in enumerate(range(0, len(perm), cfg.batch_size)):
            yield epoch * num_batches + b_idx, torch.from_numpy(perm[start:start + cfg.batch_size])

    def step(batch: tuple[int, torch.Tensor]) -> torch.Tensor:
        b_idx, index = batch
        xb, yb = x[index].to(device), y[index].to(device)
        if adversarial is not None:
            network.eval()
            xb = pgd_perturb(network, xb, yb, adversarial, batch_generator(cfg.seed, b_idx))
            network.train()
        return F.cross_entropy(network(xb), yb)

    return _fit(name, network, params, group_of, batches, num_batches, step, cfg, resume_dir)


def _pair_batches(data: AttackDataset, cfg: TrainConfig, include_clean: bool | None = None,
                  epsilons: Sequence[float] | None = None) -> EpsilonStratifiedBatches:
    return EpsilonStratifiedBatches(
        data,
        cfg.batch_size,
        cfg.include_clean if include_clean is None else include_clean,
        cfg.seed,
        epsilons if epsilons is not None else cfg.train_epsilons,
    )


def train_denoiser(
    model: Denoiser,
    data: AttackDataset,
    loss: LossSpec,
    cfg: TrainConfig,
    threat: ThreatModel | None = None,
    device: torch.device | str = "cpu",
    name: str = "denoiser",
    resume_dir: Path | None = None,
) -> TrainReport:
    """Train a single-output denoiser (u_add or u_filt) under L_img or L_sem."""
    if not isinstance(model, (AdditiveDenoiser, FilteringDenoiser)):
        raise ShapeError(f"train_denoiser needs u_add or u_filt, got {model.arch}")
    if loss.kind == "fusion_ce":
        raise ConfigError("fusion_ce only trains the fusion network")
    if loss.needs_threat and threat is None:
        raise ConfigError(f"{loss.kind} needs a threat model")
    device = torch.device(device)
    model.to(device)
    if threat is not None:
        threat.to(device)
    batches = _pair_batches(data, cfg)
    params = list(model.parameters())

    def step(batch: PairBatch) -> torch.Tensor:
        batch = batch.to(device)
        return compute_loss(loss, batch.clean, model.denoise(batch.adversarial), threat)

    report = _fit(name, model, params, model.group_of(), batches.epoch, len(batches), step, cfg, resume_dir)
    report.extra.update({"arch": model.arch, "loss": loss.kind, "strata": list(batches.strata)})
    return report


def multihead_loss(
    model: MultiHeadDenoiser, batch: PairBatch, domains: dict[str, Sequence[float]]
) -> torch.Tensor:
    """Summed image-level loss over the heads whose domain contains the batch strength."""
    heads = route_epsilon(batch.epsilon, domains, CLEAN_ROUTES["u_multihead"])
    outputs = model.denoise_heads(batch.adversarial, [int(h.split("_")[1]) for h in heads])
    return sum(loss_image(batch.clean, out) for out in outputs)


def train_multihead(
    model: MultiHeadDenoiser,
    data: AttackDataset,
    cfg: TrainConfig,
    device: torch.device | str = "cpu",
    name: str = "multihead",
    resume_dir: Path | None = None,
) -> TrainReport:
    """Shared body on every batch, head_i only on batches from its strength domain."""
    if not isinstance(model, MultiHeadDenoiser) or len(model.heads) != 4:
        raise ShapeError("train_multihead needs a u_multihead model with four heads")
    domains = dict(cfg.epsilon_domains) or MULTIHEAD_DOMAINS
    batches = _pair_batches(data, cfg)
    _check_domains(domains, model.variants, batches.strata, CLEAN_ROUTES["u_multihead"])
    device = torch.device(device)
    model.to(device)

    def step(batch: PairBatch) -> torch.Tensor:
        return multihead_loss(model, batch.to(device), domains)

    report = _fit(name, model, list(model.parameters()), model.group_of(), batches.epoch,
                  len(batches), step, cfg, resume_dir)
    report.extra.update({"arch": model.arch, "loss": "image_l1",
                         "domains": {k: list(v) for k, v in domains.items()}})
    report.extra["expected_update_counts"] = expected_update_counts(
        batches.strata, batches.batches_per_stratum, cfg.epochs, domains,
        CLEAN_ROUTES["u_multihead"], report.update_counts, shared=("encoder", "decoder"),
    )
    return report


def advfilter_stage1_loss(
    model: YNetDenoiser, batch: PairBatch, domains: dict[str, Sequence[float]]
) -> torch.Tensor:
    branches = route_epsilon(batch.epsilon, domains, CLEAN_ROUTES["y_dual"])
    outputs = model.denoise_branches(batch.adversarial, branches)
    return sum(loss_image(batch.clean, out) for out in outputs.values())


def train_advfilter_stage1(
    model: YNetDenoiser,
    data: AttackDataset,
    cfg: TrainConfig,
    device: torch.device | str = "cpu",
    name: str = "advfilter_stage1",
    resume_dir: Path | None = None,
) -> TrainReport:
    """Multi-domain L1 training of the Y-Net; the fusion network is not touched."""
    if not isinstance(model, YNetDenoiser):
        raise ShapeError(f"Stage 1 needs a y_dual model, got {model.arch}")
    domains = dict(cfg.epsilon_domains) or YNET_DOMAINS
    batches = _pair_batches(data, cfg)
    _check_domains(domains, ("sl", "m"), batches.strata, CLEAN_ROUTES["y_dual"])
    present = {b for eps in batches.strata for b in route_epsilon(eps, domains, CLEAN_ROUTES["y_dual"])}
    if present != {"sl", "m"}:
        raise ConfigError(f"Stage 1 needs strengths from both domains, only {sorted(present)} present")
    device = torch.device(device)
    model.to(device)
    params = model.ynet_parameters()
    all_groups = model.group_of()
    group_of = {id(p): all_groups[id(p)] for p in params}

    def step(batch: PairBatch) -> torch.Tensor:
        return advfilter_stage1_loss(model, batch.to(device), domains)

    report = _fit(name, model, params, group_of, batches.epoch, len(batches), step, cfg, resume_dir)
    report.extra.update({
        "arch": model.arch,
        "loss": "image_l1",
        "domains": {k: list(v) for k, v in domains.items()},
        "ynet_fingerprint": model.ynet_fingerprint(),
        "decoder_init": "independent",
    })
    report.extra["expected_update_counts"] = expected_update_counts(
        batches.strata, batches.batches_per_stratum, cfg.epochs, domains, CLEAN_ROUTES["y_dual"],
        report.update_counts, shared=("encoder",),
        route_groups={"sl": ("decoder_sl", "head_sl"), "m": ("decoder_m", "head_m")},
    )
    return report


def train_advfilter_stage2(
    model: YNetDenoiser,
    data: AttackDataset,
    cfg: TrainConfig,
    threat: ThreatModel,
    device: torch.device | str = "cpu",
    name: str = "advfilter_stage2",
    resume_dir: Path | None = None,
) -> TrainReport:
    """
    Train the fusion network on the full strength grid with the Y-Net frozen.

    Raises:
        FreezeViolation: if any Y-Net parameter changed.
    """
    if not isinstance(model, YNetDenoiser):
        raise ShapeError(f"Stage 2 needs a y_dual model, got {model.arch}")
    device = torch.device(device)
    model.to(device)
    threat.to(device)
    before = model.ynet_fingerprint()
    frozen = model.ynet_parameters()
    for p in frozen:
        p.requires_grad_(False)
    batches = _pair_batches(data, cfg)
    params = list(model.fusion.parameters())
    group_of = {id(p): "fusion" for p in params}

    def step(batch: PairBatch) -> torch.Tensor:
        batch = batch.to(device)
        with torch.no_grad():
            out = model.dual_outputs(batch.adversarial)
        weight = model.fusion(out.uncertainty_sl, out.uncertainty_m)
        fused = fuse(out.denoised_sl, out.denoised_m, weight)
        return fusion_ce(threat, batch.clean, fused, cfg.stage2_target)

    try:
        report = _fit(name, model, params, group_of, batches.epoch, len(batches), step, cfg, resume_dir)
    finally:
        for p in frozen:
            p.requires_grad_(True)

    after = model.ynet_fingerprint()
    if after != before:
        raise FreezeViolation(f"Y-Net parameters changed during fusion training ({before[:12]} -> {after[:12]})")
    report.extra.update({
        "arch": model.arch,
        "loss": "fusion_ce",
        "stage2_target": cfg.stage2_target,
        "ynet_fingerprint": before,
    })
    return report
