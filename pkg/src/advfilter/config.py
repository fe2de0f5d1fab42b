"""
Configuration management for advfilter experiments.

Supports:
- YAML config file with one section per pipeline stage
- Named presets (smoke, desk-cifar10, desk-svhn)
- Environment variable overrides
- Sensible defaults
"""

from __future__ import annotations

import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from advfilter.errors import ConfigError
from advfilter.imaging import DatasetSource

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATHS = [
    Path("advfilter.yaml"),
    Path.home() / ".config" / "advfilter" / "config.yaml",
]

# 12-strength grid {1e-m, 3e-m, 5e-m | m in 1..4}, ascending
DEFAULT_EPSILONS: tuple[float, ...] = tuple(
    sorted(float(f"{c}e-{m}") for m in range(1, 5) for c in (1, 3, 5))
)
SUPERIOR_EPSILONS: tuple[float, ...] = (0.1, 0.3, 0.5)

DENOISER_ARCHS = ("u_add", "u_filt", "u_multihead", "y_dual")
LOSS_KINDS = ("image_l1", "semantic_l1")
# Parameter groups a denoiser's epsilon_domains may route to
ROUTED_GROUPS: dict[str, tuple[str, ...]] = {
    "u_multihead": ("head_1", "head_2", "head_3", "head_4"),
    "y_dual": ("sl", "m"),
}


def _floats(values: Any) -> tuple[float, ...]:
    """YAML 1.1 reads '1e-4' as a string; coerce every entry."""
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Expected a list of numbers, got {values!r}") from e


def _in_grid(eps: float, grid: tuple[float, ...]) -> bool:
    return any(abs(eps - g) <= 1e-9 + 1e-6 * abs(g) for g in grid)


@dataclass
class TrainConfig:
    """Optimizer and sampling settings shared by every training protocol."""
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    scheduler: str = "none"  # none | cosine
    grad_clip: float = 5.0
    weight_decay: float = 0.0
    # Adds an eps=0 stratum (clean inputs) next to the attack strengths
    include_clean: bool = True
    # Restrict training pairs to these strengths (None = everything in the dataset)
    train_epsilons: tuple[float, ...] | None = None
    # Parameter group -> strengths routed to it (empty = protocol defaults)
    epsilon_domains: dict[str, tuple[float, ...]] = field(default_factory=dict)
    # Fusion training target: hard argmax of the clean logits, or the soft distribution
    stage2_target: str = "hard"
    smoothing_window: int = 50

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
        base = base or cls()
        train_eps = data.get("train_epsilons", base.train_epsilons)
        domains = data.get("epsilon_domains")
        return cls(
            learning_rate=float(data.get("learning_rate", base.learning_rate)),
            batch_size=int(data.get("batch_size", base.batch_size)),
            epochs=int(data.get("epochs", base.epochs)),
            seed=int(data.get("seed", base.seed)),
            scheduler=data.get("scheduler", base.scheduler),
            grad_clip=float(data.get("grad_clip", base.grad_clip)),
            weight_decay=float(data.get("weight_decay", base.weight_decay)),
            include_clean=bool(data.get("include_clean", base.include_clean)),
            train_epsilons=_floats(train_eps) if train_eps is not None else None,
            epsilon_domains=(
                {k: _floats(v) for k, v in domains.items()}
                if domains is not None
                else dict(base.epsilon_domains)
            ),
            stage2_target=data.get("stage2_target", base.stage2_target),
            smoothing_window=int(data.get("smoothing_window", base.smoothing_window)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "scheduler": self.scheduler,
            "grad_clip": self.grad_clip,
            "weight_decay": self.weight_decay,
            "include_clean": self.include_clean,
            "train_epsilons": list(self.train_epsilons) if self.train_epsilons else None,
            "epsilon_domains": {k: list(v) for k, v in self.epsilon_domains.items()},
            "stage2_target": self.stage2_target,
            "smoothing_window": self.smoothing_window,
        }


@dataclass
class DatasetConfig:
    """Where images come from and how many of them each stage uses."""
    train_source: DatasetSource = field(default_factory=lambda: DatasetSource(kind="synthetic"))
    test_source: DatasetSource = field(
        default_factory=lambda: DatasetSource(kind="synthetic", split="test")
    )
    threat_train_size: int = 2000
    denoiser_train_size: int = 2000
    test_size: int = 500
    seed: int = 7


@dataclass
class ThreatConfig:
    """Clean-trained classifier (the attacked model)."""
    width: int = 32
    checkpoint: str | None = None
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=128, epochs=30,
                                            include_clean=False)
    )


@dataclass
class AdvThreatConfig:
    """PGD adversarial training of the classifier used in the combination study."""
    epsilon: float = 0.03
    iterations: int = 7
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=128, epochs=30,
                                            include_clean=False)
    )


@dataclass
class AttackConfig:
    """PGD settings for the denoiser training set."""
    iterations: int = 40
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    seed: int = 0
    batch_size: int = 32


@dataclass
class BackboneSettings:
    """Channel plan of the U/Y-Net backbone."""
    base_channels: int = 32
    bottleneck_channels: int = 128
    kernel_size: int = 5


@dataclass
class DenoiserConfig:
    """One denoiser to build and train."""
    name: str
    arch: str
    loss: str = "image_l1"
    kernel_size: int | None = None  # falls back to backbone.kernel_size
    probe_layer: str = "layer3"
    train_epsilons: tuple[float, ...] | None = None
    include_clean: bool = True
    epochs: int | None = None  # falls back to training.epochs
    # Routed group -> strengths (empty = protocol defaults); u_multihead and y_dual only
    epsilon_domains: dict[str, tuple[float, ...]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, name: str, data: dict[str, Any]) -> DenoiserConfig:
        train_eps = data.get("train_epsilons")
        return cls(
            name=name,
            arch=data.get("arch", "u_filt"),
            loss=data.get("loss", "image_l1"),
            kernel_size=data.get("kernel_size"),
            probe_layer=data.get("probe_layer", "layer3"),
            train_epsilons=_floats(train_eps) if train_eps is not None else None,
            include_clean=bool(data.get("include_clean", True)),
            epochs=data.get("epochs"),
            epsilon_domains={
                k: _floats(v) for k, v in (data.get("epsilon_domains") or {}).items()
            },
        )


def default_denoisers() -> dict[str, DenoiserConfig]:
    """Default denoiser set: the loss × output grid, superior-strength Filt, multi-head and AdvFilter."""
    specs = [
        DenoiserConfig("add_lsem", "u_add", loss="semantic_l1"),
        DenoiserConfig("filt_lsem", "u_filt", loss="semantic_l1"),
        DenoiserConfig("add_limg", "u_add"),
        DenoiserConfig("filt_limg", "u_filt"),
        DenoiserConfig("filt_limg_star", "u_filt", train_epsilons=SUPERIOR_EPSILONS,
                       include_clean=False),
        DenoiserConfig("multihead", "u_multihead"),
        DenoiserConfig("advfilter", "y_dual"),
    ]
    return {spec.name: spec for spec in specs}


@dataclass
class EvaluationConfig:
    """Sweep grid and which pipelines to report."""
    epsilon_grid: tuple[float, ...] = (0.0,) + DEFAULT_EPSILONS
    iteration_grid: tuple[int, ...] = (40,)
    images_per_cell: int = 500
    iteration_sweep_epsilon: float = 0.3
    iteration_sweep: tuple[int, ...] = (10, 30, 50, 70, 90)
    pipelines: tuple[str, ...] = (
        "none", "add_lsem", "filt_lsem", "add_limg", "filt_limg", "filt_limg_star",
        "multihead", "advfilter_sl", "advfilter_m", "advfilter",
    )
    combination_denoisers: tuple[str, ...] = ("none", "add_limg", "filt_limg", "advfilter")
    seed: int = 11


@dataclass
class LogConfig:
    """Logging configuration."""
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: str | None = None


@dataclass
class ExperimentConfig:
    """Main configuration container."""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    threat: ThreatConfig = field(default_factory=ThreatConfig)
    adv_threat: AdvThreatConfig = field(default_factory=AdvThreatConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    denoisers: dict[str, DenoiserConfig] = field(default_factory=default_denoisers)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    log: LogConfig = field(default_factory=LogConfig)
    output: str = "runs/default"
    device: str = "auto"
    deterministic: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        """Create ExperimentConfig from dictionary."""
        ds_data = data.get("dataset", {})
        threat_data = data.get("threat", {})
        adv_data = data.get("adv_threat", {})
        attack_data = data.get("attack", {})
        bb_data = data.get("backbone", {})
        eval_data = data.get("evaluation", {})
        log_data = data.get("log", {})

        defaults = cls()
        training = TrainConfig.from_dict(data.get("training", {}))
        denoiser_data = data.get("denoisers")
        denoisers = (
            {name: DenoiserConfig.from_dict(name, spec or {}) for name, spec in denoiser_data.items()}
            if denoiser_data
            else default_denoisers()
        )

        config = cls(
            dataset=DatasetConfig(
                train_source=DatasetSource.from_dict(ds_data.get("train_source", {})),
                test_source=DatasetSource.from_dict({"split": "test", **ds_data.get("test_source", {})}),
                threat_train_size=int(ds_data.get("threat_train_size", 2000)),
                denoiser_train_size=int(ds_data.get("denoiser_train_size", 2000)),
                test_size=int(ds_data.get("test_size", 500)),
                seed=int(ds_data.get("seed", 7)),
            ),
            threat=ThreatConfig(
                width=int(threat_data.get("width", 32)),
                checkpoint=threat_data.get("checkpoint"),
                train=TrainConfig.from_dict(threat_data.get("train", {}), defaults.threat.train),
            ),
            adv_threat=AdvThreatConfig(
                epsilon=float(adv_data.get("epsilon", 0.03)),
                iterations=int(adv_data.get("iterations", 7)),
                train=TrainConfig.from_dict(adv_data.get("train", {}), defaults.adv_threat.train),
            ),
            attack=AttackConfig(
                iterations=int(attack_data.get("iterations", 40)),
                epsilons=_floats(attack_data.get("epsilons", DEFAULT_EPSILONS)),
                seed=int(attack_data.get("seed", 0)),
                batch_size=int(attack_data.get("batch_size", 32)),
            ),
            backbone=BackboneSettings(
                base_channels=int(bb_data.get("base_channels", 32)),
                bottleneck_channels=int(bb_data.get("bottleneck_channels", 128)),
                kernel_size=int(bb_data.get("kernel_size", 5)),
            ),
            training=training,
            denoisers=denoisers,
            evaluation=EvaluationConfig(
                epsilon_grid=_floats(eval_data.get("epsilon_grid", defaults.evaluation.epsilon_grid)),
                iteration_grid=tuple(int(n) for n in eval_data.get("iteration_grid", (40,))),
                images_per_cell=int(eval_data.get("images_per_cell", 500)),
                iteration_sweep_epsilon=float(eval_data.get("iteration_sweep_epsilon", 0.3)),
                iteration_sweep=tuple(
                    int(n) for n in eval_data.get("iteration_sweep", (10, 30, 50, 70, 90))
                ),
                pipelines=tuple(eval_data.get("pipelines", defaults.evaluation.pipelines)),
                combination_denoisers=tuple(
                    eval_data.get("combination_denoisers", defaults.evaluation.combination_denoisers)
                ),
                seed=int(eval_data.get("seed", 11)),
            ),
            log=LogConfig(
                level=log_data.get("level", "INFO"),
                format=log_data.get(
                    "format",
                    "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
                ),
                file=log_data.get("file"),
            ),
            output=data.get("output", "runs/default"),
            device=data.get("device", "auto"),
            deterministic=bool(data.get("deterministic", False)),
            seed=int(data.get("seed", 0)),
        )
        config.validate()
        return config

    @classmethod
    def from_yaml(cls, path: Path) -> ExperimentConfig:
        """Load config from YAML file."""
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        return cls.from_dict(data)

    def apply_env_overrides(self) -> None:
        """Apply environment variable overrides."""
        if device := os.environ.get("ADVFILTER_DEVICE"):
            self.device = device
        if out := os.environ.get("ADVFILTER_OUT"):
            self.output = out
        if seed := os.environ.get("ADVFILTER_SEED"):
            self.seed = int(seed)
        if log_level := os.environ.get("LOG_LEVEL"):
            self.log.level = log_level.upper()

    def validate(self) -> None:
        """Raise ConfigError on inconsistent settings."""
        for eps in self.attack.epsilons:
            if not 0.0 <= eps <= 1.0:
                raise ConfigError(f"Attack strength {eps} outside [0, 1]")
        if self.attack.iterations < 1:
            raise ConfigError("attack.iterations must be >= 1")
        if self.backbone.kernel_size % 2 == 0:
            raise ConfigError(f"backbone.kernel_size must be odd, got {self.backbone.kernel_size}")
        if self.training.scheduler not in ("none", "cosine"):
            raise ConfigError(f"Unknown scheduler: {self.training.scheduler}")
        if self.training.stage2_target not in ("hard", "soft"):
            raise ConfigError(f"Unknown stage2_target: {self.training.stage2_target}")
        if self.training.epsilon_domains:
            raise ConfigError("epsilon_domains is set per denoiser (denoisers.<name>.epsilon_domains), "
                              "not in the shared training section")
        for name, spec in self.denoisers.items():
            if spec.arch not in DENOISER_ARCHS:
                raise ConfigError(f"Denoiser {name}: unknown arch {spec.arch!r}")
            if spec.loss not in LOSS_KINDS:
                raise ConfigError(f"Denoiser {name}: unknown loss {spec.loss!r}")
            if spec.kernel_size is not None and spec.kernel_size % 2 == 0:
                raise ConfigError(f"Denoiser {name}: kernel_size must be odd")
            for eps in spec.train_epsilons or ():
                if not _in_grid(eps, self.attack.epsilons):
                    raise ConfigError(
                        f"Denoiser {name}: train strength {eps} is not in the attack grid"
                    )
            groups = ROUTED_GROUPS.get(spec.arch, ())
            unknown = sorted(set(spec.epsilon_domains) - set(groups))
            if unknown:
                raise ConfigError(
                    f"Denoiser {name}: epsilon_domains groups {unknown} do not exist for {spec.arch} "
                    f"(routable: {list(groups) or 'none'})"
                )
            for group, strengths in spec.epsilon_domains.items():
                for eps in strengths:
                    if eps != 0.0 and not _in_grid(eps, self.attack.epsilons):
                        raise ConfigError(
                            f"Denoiser {name}: {group} strength {eps} is not in the attack grid"
                        )

    def kernel_size_for(self, name: str) -> int:
        spec = self.denoisers[name]
        return spec.kernel_size or self.backbone.kernel_size

    def train_config_for(self, name: str) -> TrainConfig:
        """Shared training settings specialised for one denoiser."""
        spec = self.denoisers[name]
        data = self.training.to_dict()
        if spec.epochs is not None:
            data["epochs"] = spec.epochs
        if spec.train_epsilons is not None:
            data["train_epsilons"] = list(spec.train_epsilons)
        data["include_clean"] = spec.include_clean and self.training.include_clean
        data["epsilon_domains"] = {k: list(v) for k, v in spec.epsilon_domains.items()}
        return TrainConfig.from_dict(data)


def _desk_profile(name: str, root: Path, train_dir: str, test_dir: str) -> ExperimentConfig:
    config = ExperimentConfig()
    config.dataset = DatasetConfig(
        train_source=DatasetSource(kind="folder", path=str(root / train_dir)),
        test_source=DatasetSource(kind="folder", path=str(root / test_dir), split="test"),
        threat_train_size=20000,
        denoiser_train_size=2000,
        test_size=500,
        seed=7,
    )
    config.output = f"runs/{name}"
    return config


def _smoke_profile(root: Path | None = None) -> ExperimentConfig:
    config = ExperimentConfig()
    config.dataset = DatasetConfig(
        train_source=DatasetSource(kind="synthetic", num_classes=10, height=32, width=32),
        test_source=DatasetSource(kind="synthetic", num_classes=10, height=32, width=32,
                                  split="test"),
        threat_train_size=500,
        denoiser_train_size=16,
        test_size=16,
        seed=7,
    )
    config.threat.train = TrainConfig(learning_rate=1e-3, batch_size=64, epochs=4,
                                      include_clean=False)
    config.adv_threat = AdvThreatConfig(
        epsilon=0.03,
        iterations=3,
        train=TrainConfig(learning_rate=1e-3, batch_size=64, epochs=2, include_clean=False),
    )
    # one strength per Y-Net domain so both decoders see data
    config.attack = AttackConfig(iterations=10, epsilons=(0.01, 0.3), seed=0, batch_size=16)
    config.backbone = BackboneSettings(base_channels=16, bottleneck_channels=32, kernel_size=5)
    config.training = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=2)
    config.denoisers["filt_limg_star"].train_epsilons = (0.3,)
    config.evaluation = EvaluationConfig(
        epsilon_grid=(0.0, 0.01, 0.3),
        iteration_grid=(10,),
        images_per_cell=16,
        iteration_sweep_epsilon=0.3,
        iteration_sweep=(10, 30),
    )
    config.output = "runs/smoke"
    return config


PROFILES = ("smoke", "desk-cifar10", "desk-svhn")


def load_profile(name: str, data_root: str | Path | None = None) -> ExperimentConfig:
    """Build a named preset. Unknown names raise ConfigError."""
    root = Path(data_root) if data_root else Path("data")
    if name == "smoke":
        config = _smoke_profile()
    elif name == "desk-cifar10":
        config = _desk_profile(name, root / "cifar10", "train", "test")
    elif name == "desk-svhn":
        config = _desk_profile(name, root / "svhn", "train", "test")
    else:
        raise ConfigError(f"Unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    config.validate()
    return config


def load_config(config_path: str | Path | None = None) -> ExperimentConfig:
    """
    Load configuration from file with environment overrides.

    Args:
        config_path: Explicit path to config file. If None, searches default locations.

    Returns:
        Loaded and validated ExperimentConfig object.
    """
    config = ExperimentConfig()

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        logger.info(f"Loading config from {path}")
        config = ExperimentConfig.from_yaml(path)
    else:
        for path in DEFAULT_CONFIG_PATHS:
            if path.exists():
                logger.info(f"Loading config from {path}")
                config = ExperimentConfig.from_yaml(path)
                break
        else:
            logger.info("No config file found, using defaults")

    config.apply_env_overrides()

    return config


def setup_logging(config: LogConfig) -> None:
    """Configure logging based on config."""
    handlers: list[logging.Handler] = []

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(config.format))
    handlers.append(console)

    if config.file:
        file_handler = logging.FileHandler(config.file)
        file_handler.setFormatter(logging.Formatter(config.format))
        handlers.append(file_handler)

    logging.basicConfig(
        level=getattr(logging, config.level.upper(), logging.INFO),
        format=config.format,
        handlers=handlers,
        force=True,
    )

    # Quiet down noisy libraries
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def resolve_device(name: str) -> torch.device:
    """Map a device setting ('auto', 'cpu', 'cuda:0', 'mps') to a torch.device."""
    if name == "auto":
        if torch.cuda.is_available():
            return torch.device("cuda")
        if getattr(torch.backends, "mps", None) and torch.backends.mps.is_available():
            return torch.device("mps")
        return torch.device("cpu")
    try:
        return torch.device(name)
    except RuntimeError as e:
        raise ConfigError(f"Invalid device {name!r}: {e}") from e


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
        logger.debug("Deterministic execution enabled")
