"""
Main entry point for advfilter.

Orchestrates the experiment stages:
- threat classifier training (clean and adversarial)
- attacked training set generation
- denoiser training (four-way grid, multi-head, two-stage AdvFilter)
- denoise-then-classify evaluation, report rendering and the acceptance checklist

Every stage output goes through the artifact store under <out>/artifacts and
is rebuilt only when its recipe changes.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence

import pandas as pd
import torch

from advfilter.acceptance import Checklist, evaluate_acceptance
from advfilter.artifacts import ArtifactStore, Manifest, recipe_hash
from advfilter.attack import AttackDataset, AttackSpec, ThreatModel, attack_tensor, build_attack_dataset
from advfilter.config import (
    PROFILES,
    ExperimentConfig,
    load_config,
    load_profile,
    resolve_device,
    seed_everything,
    setup_logging,
)
from advfilter.errors import AdvFilterError, ConfigError, MissingArtifactError
from advfilter.evaluation import (
    PIPELINE_SOURCES,
    AttackCache,
    CombinationStudy,
    PipelineSpec,
    SweepResult,
    SweepSpec,
    build_adversarially_trained_classifier,
    combination_study,
    evaluate_pipeline,
    expand_pipelines,
    uncertainty_statistics,
)
from advfilter.filtering import uncertainty_map
from advfilter.imaging import (
    LabeledImage,
    dataset_fingerprint,
    load_dataset,
    load_image,
    stack_images,
    to_array,
)
from advfilter.losses import LossSpec
from advfilter.models import (
    BackboneConfig,
    Denoiser,
    MultiHeadDenoiser,
    ResidualClassifier,
    YNetDenoiser,
    build_denoiser,
    denoiser_from_payload,
)
from advfilter.report import (
    collect_uncertainty_strip,
    kernel_logits,
    plot_uncertainty_strip,
    render_kernel_figure,
    render_report,
)
from advfilter.training import (
    train_advfilter_stage1,
    train_advfilter_stage2,
    train_classifier,
    train_denoiser,
    train_multihead,
)

logger = logging.getLogger(__name__)

THREAT_REF = "threat"
ADV_THREAT_REF = "adv_threat"
TRAIN_ATTACKS_REF = "attacks/train"
SMOKE_BUDGET_SECONDS = 600.0


def denoiser_ref(name: str) -> str:
    return f"denoisers/{name}"


def stage1_ref(name: str) -> str:
    return f"denoisers/{name}_stage1"


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Log stage boundaries; a failing stage is named before the error propagates."""
    started = time.monotonic()
    logger.info(f"== {name} ==")
    try:
        yield
    except Exception as e:
        logger.error(f"Stage {name!r} failed: {e}")
        raise
    logger.info(f"== {name} done ({time.monotonic() - started:.1f}s) ==")


class Experiment:
    """
    Runs pipeline stages against one config and one artifact store.

    Stages pull their upstream artifacts on demand, so any stage can be run
    on its own once (or before) its dependencies exist.
    """

    def __init__(self, config: ExperimentConfig, progress: bool = True):
        self.config = config
        self.device = resolve_device(config.device)
        self.out = Path(config.output)
        self.store = ArtifactStore(self.out / "artifacts")
        self.progress = progress
        self.reports: dict[str, dict[str, Any]] = {}
        self._images: dict[str, list[LabeledImage]] = {}
        self._data_recipes: dict[str, dict[str, Any]] = {}
        self._threats: dict[str, ThreatModel] = {}
        self._attacks: AttackDataset | None = None
        self._cache: AttackCache | None = None
        logger.info(f"Artifacts under {self.store.root}, device {self.device}")

    # -- data ----------------------------------------------------------------

    def images(self, role: str) -> list[LabeledImage]:
        """'threat' / 'denoiser' training images or the 'test' images."""
        if role not in self._images:
            ds = self.config.dataset
            source, size = {
                "threat": (ds.train_source, ds.threat_train_size),
                "denoiser": (ds.train_source, ds.denoiser_train_size),
                "test": (ds.test_source, ds.test_size),
            }[role]
            images = load_dataset(source, size, ds.seed)
            if not images:
                raise ConfigError(f"No {role} images configured")
            logger.info(f"Loaded {len(images)} {role} images from {source.resolved_kind()} source")
            self._images[role] = images
        return self._images[role]

    def data_recipe(self, role: str) -> dict[str, Any]:
        if role not in self._data_recipes:
            images = self.images(role)
            ds = self.config.dataset
            source = ds.test_source if role == "test" else ds.train_source
            self._data_recipes[role] = {
                "source": source.to_dict(),
                "size": len(images),
                "seed": ds.seed,
                "fingerprint": dataset_fingerprint(images),
            }
        return self._data_recipes[role]

    def num_classes(self) -> int:
        labels = max(item.label for item in self.images("threat")) + 1
        return max(labels, self.config.dataset.train_source.num_classes)

    def _resume_dir(self, name: str) -> Path:
        return self.out / "resume" / name

    # -- classifiers ---------------------------------------------------------

    def _load_threat(self, ref: str) -> ThreatModel:
        model = ThreatModel.from_payload(self.store.load_checkpoint(ref)).to(self.device)
        self.reports[ref] = self.store.manifest(ref).metadata
        x, y = stack_images(self.images("test"))
        logger.info(f"{ref}: clean test accuracy {model.accuracy(x, y):.3f}")
        return model

    def threat(self) -> ThreatModel:
        """The clean-trained classifier φ: external checkpoint, stored artifact or freshly trained."""
        if THREAT_REF in self._threats:
            return self._threats[THREAT_REF]
        cfg = self.config.threat
        if cfg.checkpoint:
            path = Path(cfg.checkpoint)
            if not path.exists():
                raise MissingArtifactError(f"Threat checkpoint not found: {path}")
            payload = torch.load(path, map_location="cpu", weights_only=False)
            model = ThreatModel.from_payload(payload).to(self.device)
            logger.info(f"Using external threat classifier {path} ({model.fingerprint()[:12]})")
        else:
            recipe = {
                "stage": "threat",
                "data": self.data_recipe("threat"),
                "width": cfg.width,
                "train": cfg.train.to_dict(),
            }
            if self.store.lookup(THREAT_REF, recipe) is None:
                seed_everything(cfg.train.seed, self.config.deterministic)
                network = ResidualClassifier(num_classes=self.num_classes(), width=cfg.width)
                report = train_classifier(network, self.images("threat"), cfg.train, self.device,
                                          name=THREAT_REF, resume_dir=self._resume_dir(THREAT_REF))
                payload = network.checkpoint_payload({"recipe_hash": recipe_hash(recipe)})
                self.store.put_checkpoint(THREAT_REF, payload, recipe, metrics=report,
                                          metadata=report.to_dict())
            model = self._load_threat(THREAT_REF)
        self._threats[THREAT_REF] = model
        return model

    def adv_threat(self) -> ThreatModel:
        """The adversarially trained classifier φ′ for the combination study."""
        if ADV_THREAT_REF in self._threats:
            return self._threats[ADV_THREAT_REF]
        cfg = self.config.adv_threat
        reference = self.threat()
        spec = AttackSpec(cfg.iterations, cfg.epsilon)
        recipe = {
            "stage": "adv_threat",
            "data": self.data_recipe("threat"),
            "width": self.config.threat.width,
            "attack": spec.to_dict(),
            "train": cfg.train.to_dict(),
            "reference": reference.fingerprint(),
        }
        if self.store.lookup(ADV_THREAT_REF, recipe) is None:
            seed_everything(cfg.train.seed, self.config.deterministic)
            robust, report = build_adversarially_trained_classifier(
                self.images("threat"), spec, cfg.train, self.num_classes(), self.config.threat.width,
                self.device, reference=reference, holdout=self.images("test"),
            )
            payload = robust.network.checkpoint_payload({"recipe_hash": recipe_hash(recipe),
                                                          "adversarial": spec.to_dict(),
                                                          **robust.provenance})
            self.store.put_checkpoint(ADV_THREAT_REF, payload, recipe,
                                      upstream={"reference": reference.fingerprint()},
                                      metrics=report, metadata=report.to_dict())
        model = self._load_threat(ADV_THREAT_REF)
        self._threats[ADV_THREAT_REF] = model
        return model

    # -- attacked training set -----------------------------------------------

    def attack_data(self) -> AttackDataset:
        if self._attacks is not None:
            return self._attacks
        cfg = self.config.attack
        threat = self.threat()
        recipe = {
            "stage": "attack",
            "threat": threat.fingerprint(),
            "data": self.data_recipe("denoiser"),
            "iterations": cfg.iterations,
            "epsilons": list(cfg.epsilons),
            "seed": cfg.seed,
        }
        if self.store.lookup(TRAIN_ATTACKS_REF, recipe) is None:
            dataset = build_attack_dataset(threat, self.images("denoiser"), cfg.epsilons, cfg.iterations,
                                           cfg.seed, cfg.batch_size, self.progress)
            self.store.put_attack_dataset(TRAIN_ATTACKS_REF, dataset, recipe, threat.fingerprint())
        self._attacks = self.store.load_attack_dataset(TRAIN_ATTACKS_REF)
        logger.info(f"Attack dataset: {self._attacks.num_images} images × "
                    f"{len(self._attacks.epsilons)} strengths")
        return self._attacks

    # -- denoisers -----------------------------------------------------------

    def backbone(self) -> BackboneConfig:
        bb = self.config.backbone
        return BackboneConfig(base_channels=bb.base_channels, bottleneck_channels=bb.bottleneck_channels)

    def _denoiser_recipe(self, name: str) -> dict[str, Any]:
        spec = self.config.denoisers[name]
        self.attack_data()
        return {
            "stage": "denoiser",
            "name": name,
            "arch": spec.arch,
            "loss": spec.loss,
            "probe_layer": spec.probe_layer,
            "kernel_size": self.config.kernel_size_for(name),
            "backbone": self.backbone().to_dict(),
            "train": self.config.train_config_for(name).to_dict(),
            "attacks": self.store.manifest(TRAIN_ATTACKS_REF).fingerprint,
            "threat": self.threat().fingerprint(),
        }

    def _store_denoiser(self, ref: str, model: Denoiser, recipe: dict[str, Any], report: Any,
                        upstream: dict[str, str]) -> Manifest:
        payload = model.checkpoint_payload({"recipe_hash": recipe_hash(recipe), **upstream})
        return self.store.put_checkpoint(ref, payload, recipe, upstream=upstream, metrics=report,
                                         metadata=report.to_dict())

    def train(self, name: str) -> Manifest:
        """Train one configured denoiser (both stages for a y_dual model)."""
        if name not in self.config.denoisers:
            raise ConfigError(f"Unknown denoiser {name!r}; configured: {', '.join(self.config.denoisers)}")
        spec = self.config.denoisers[name]
        if spec.arch == "y_dual":
            return self._train_advfilter(name)

        recipe = self._denoiser_recipe(name)
        ref = denoiser_ref(name)
        manifest = self.store.lookup(ref, recipe)
        if manifest is None:
            cfg = self.config.train_config_for(name)
            seed_everything(cfg.seed, self.config.deterministic)
            model = build_denoiser(spec.arch, self.backbone(), self.config.kernel_size_for(name))
            data, threat = self.attack_data(), self.threat()
            if isinstance(model, MultiHeadDenoiser):
                report = train_multihead(model, data, cfg, self.device, name, self._resume_dir(name))
            else:
                loss = LossSpec(spec.loss, spec.probe_layer if spec.loss == "semantic_l1" else None)
                report = train_denoiser(model, data, loss, cfg, threat if loss.needs_threat else None,
                                        self.device, name, self._resume_dir(name))
            manifest = self._store_denoiser(ref, model, recipe, report,
                                            {"attacks": recipe["attacks"], "threat": recipe["threat"]})
        self.reports[name] = manifest.metadata
        return manifest

    def _train_advfilter(self, name: str) -> Manifest:
        """Stage 1 (Y-Net, multi-domain L1) then stage 2 (fusion, Y-Net frozen), chained."""
        recipe1 = self._denoiser_recipe(name)
        ref1, ref2 = stage1_ref(name), denoiser_ref(name)
        cfg = self.config.train_config_for(name)
        data, threat = self.attack_data(), self.threat()

        stage1 = self.store.lookup(ref1, recipe1)
        if stage1 is None:
            seed_everything(cfg.seed, self.config.deterministic)
            model = build_denoiser("y_dual", self.backbone(), self.config.kernel_size_for(name))
            report = train_advfilter_stage1(model, data, cfg, self.device, f"{name}_stage1",
                                            self._resume_dir(f"{name}_stage1"))
            stage1 = self._store_denoiser(ref1, model, recipe1, report, {"attacks": recipe1["attacks"]})
        self.reports[f"{name}_stage1"] = stage1.metadata

        recipe2 = {**recipe1, "stage": "fusion", "stage1": stage1.fingerprint,
                   "stage2_target": cfg.stage2_target}
        manifest = self.store.lookup(ref2, recipe2)
        if manifest is None:
            model = denoiser_from_payload(self.store.load_checkpoint(ref1))
            stage2_cfg = self.config.train_config_for(name)
            stage2_cfg.train_epsilons = None
            report = train_advfilter_stage2(model, data, stage2_cfg, threat, self.device, name,
                                            self._resume_dir(name))
            manifest = self._store_denoiser(ref2, model, recipe2, report,
                                            {"stage1": stage1.fingerprint, "threat": recipe1["threat"]})
        self.reports[name] = manifest.metadata
        return manifest

    def load_denoiser(self, name: str) -> tuple[Denoiser, Manifest]:
        ref = denoiser_ref(name)
        manifest = self.store.manifest(ref)
        model = denoiser_from_payload(self.store.load_checkpoint(ref)).to(self.device)
        model.eval()
        self.reports.setdefault(name, manifest.metadata)
        if isinstance(model, YNetDenoiser) and self.store.exists(stage1_ref(name)):
            self.reports.setdefault(f"{name}_stage1", self.store.manifest(stage1_ref(name)).metadata)
        return model, manifest

    # -- evaluation ----------------------------------------------------------

    def cache(self) -> AttackCache:
        if self._cache is None:
            cfg = self.config
            self._cache = AttackCache(self.images("test"), cfg.evaluation.seed, cfg.attack.batch_size,
                                      self.store, self.progress)
        return self._cache

    def sweep(self, iterations_sweep: bool = False) -> SweepSpec:
        ev = self.config.evaluation
        extra = tuple((ev.iteration_sweep_epsilon, n) for n in ev.iteration_sweep) if iterations_sweep else ()
        return SweepSpec(ev.epsilon_grid, ev.iteration_grid, ev.images_per_cell, extra)

    def evaluate_one(self, pipeline: str, sweep: SweepSpec) -> SweepResult:
        source, variant = PIPELINE_SOURCES[pipeline]
        denoiser, manifest = self.load_denoiser(source) if source else (None, None)
        pipe = PipelineSpec(pipeline, self.threat(), denoiser, variant,
                            expected_fingerprint=manifest.fingerprint if manifest else None)
        name = f"results/clean/{pipeline}"
        recipe = {
            "stage": "evaluate",
            "fingerprints": pipe.fingerprints(),
            "variant": variant,
            "sweep": sweep.to_dict(),
            "seed": self.config.evaluation.seed,
            "test": self.data_recipe("test"),
        }
        if self.store.lookup(name, recipe) is not None:
            return SweepResult.from_dict(self.store.load_json(name))
        result = evaluate_pipeline(pipe, sweep, self.cache())
        self.store.put_json(name, result.to_dict(), recipe)
        return result

    def combination(self, sweep: SweepSpec) -> CombinationStudy:
        ev = self.config.evaluation
        denoisers: dict[str, tuple[Denoiser | None, str | None]] = {}
        for pipeline in expand_pipelines(ev.combination_denoisers):
            source, variant = PIPELINE_SOURCES[pipeline]
            denoisers[pipeline] = (self.load_denoiser(source)[0] if source else None, variant)
        classifiers = {"clean": self.threat(), "adversarial": self.adv_threat()}
        return combination_study(denoisers, classifiers, sweep, self.cache(),
                                 ev.iteration_sweep_epsilon, ev.iteration_sweep)

    def uncertainty(self, figures: Path) -> tuple[dict[str, pd.DataFrame], list[Path]]:
        """Uncertainty statistics over the attack grid for the filtering models that exist."""
        frames: dict[str, pd.DataFrame] = {}
        written: list[Path] = []
        n = self.config.evaluation.iteration_grid[0]
        epsilons = (0.0, *self.config.attack.epsilons)
        count = min(self.config.evaluation.images_per_cell, len(self.images("test")))
        for name, variant in (("filt_limg", None), ("advfilter", "fused")):
            if not self.store.exists(denoiser_ref(name)):
                continue
            denoiser, _ = self.load_denoiser(name)
            frames[name] = uncertainty_statistics(denoiser, self.threat(), self.cache(), epsilons, n,
                                                  variant, images=count)
            strip = collect_uncertainty_strip(denoiser, self.threat(), self.cache(), epsilons, n,
                                              variant=None if variant == "fused" else variant)
            plot_uncertainty_strip(strip, figures / "uncertainty" / f"{name}.png", name)
            written.append(figures / "uncertainty" / f"{name}.png")
            written.append(render_kernel_figure(denoiser, self.images("test")[0].image,
                                                figures / "kernels" / f"{name}.png"))
        return frames, written

    def evaluate(
        self,
        pipelines: Sequence[str],
        iterations_sweep: bool = False,
        combination: bool = False,
        with_uncertainty: bool = True,
    ) -> tuple[list[SweepResult], CombinationStudy | None, dict[str, pd.DataFrame]]:
        """Sweep the named pipelines and write the report bundle under <out>/report."""
        sweep = self.sweep(iterations_sweep)
        results = [self.evaluate_one(p, sweep) for p in expand_pipelines(pipelines)]
        study = self.combination(self.sweep(False)) if combination else None
        report_dir = self.out / "report"
        frames, figures = self.uncertainty(report_dir / "figures") if with_uncertainty else ({}, [])
        render_report(results, report_dir, study, frames, figures)
        return results, study, frames

    # -- full run ------------------------------------------------------------

    def configured_pipelines(self) -> list[str]:
        """Evaluation pipelines whose denoiser is configured."""
        names = expand_pipelines(self.config.evaluation.pipelines)
        return [p for p in names if PIPELINE_SOURCES[p][0] in (None, *self.config.denoisers)]

    def reproduce(self, budget: float | None = None) -> Checklist:
        started = time.monotonic()
        with stage("threat classifier"):
            self.threat()
        with stage("attack generation"):
            self.attack_data()
        for name in self.config.denoisers:
            with stage(f"train {name}"):
                self.train(name)
        with stage("adversarially trained classifier"):
            self.adv_threat()
        with stage("evaluation"):
            results, study, frames = self.evaluate(self.configured_pipelines(), iterations_sweep=True,
                                                   combination=True)
        with stage("acceptance"):
            checklist = evaluate_acceptance(
                results,
                self.config.evaluation.iteration_grid[0],
                combination=study,
                uncertainty=frames.get("filt_limg"),
                reports=self.reports,
                attack_data=self.attack_data(),
                threat=self.threat(),
                elapsed=time.monotonic() - started,
                budget=budget,
            )
            checklist.write(self.out / "report")
        return checklist

    # -- inspection ----------------------------------------------------------

    def inspect(self, what: str, checkpoint: str, image_path: str, variant: str | None,
                epsilons: Sequence[float]) -> Path:
        """Kernel or uncertainty figure of one denoiser on one image file."""
        path = Path(checkpoint)
        if path.exists():
            payload = torch.load(path, map_location="cpu", weights_only=False)
        else:
            payload = self.store.load_checkpoint(denoiser_ref(checkpoint))
        denoiser = denoiser_from_payload(payload).to(self.device).eval()
        if variant is not None and variant not in denoiser.variants:
            raise ConfigError(f"{denoiser.arch} has no variant {variant!r}")
        image = load_image(image_path)
        target = self.out / "inspect" / f"{Path(image_path).stem}_{what}.png"
        if what == "kernels":
            return render_kernel_figure(denoiser, image, target, variant)

        columns = []
        images = {0.0: image}
        if any(eps > 0 for eps in epsilons):
            threat = self.threat()
            label = threat.predict(image.unsqueeze(0))
            for eps in epsilons:
                if eps > 0:
                    spec = AttackSpec(self.config.attack.iterations, eps)
                    images[eps] = attack_tensor(threat, image.unsqueeze(0), label, spec,
                                                self.config.attack.seed)[0]
        for eps in epsilons:
            logits = kernel_logits(denoiser, images[eps].to(self.device), variant)
            columns.append((eps, to_array(images[eps]), uncertainty_map(logits).cpu().numpy()))
        means = plot_uncertainty_strip(columns, target, Path(checkpoint).stem)
        logger.info("\n" + means.to_string(index=False))
        return target


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=str,
                        help="Path to config file (default: search standard locations)")
    common.add_argument("--seed", type=int,
                        help="Override the attack, training and evaluation seeds "
                             "(dataset sampling keeps dataset.seed)")
    common.add_argument("--out", type=str, help="Output directory (artifacts, report)")
    common.add_argument("--deterministic", action="store_true",
                        help="Force deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")

    parser = argparse.ArgumentParser(
        prog="advfilter",
        description="Pixel-wise filtering defenses against adversarial examples",
    )
    parser.add_argument("--version", action="store_true", help="Show version and exit")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("attack-gen", parents=[common], help="Generate the attacked training set")
    sub.add_parser("train-threat", parents=[common], help="Train the clean threat classifier")
    sub.add_parser("train-adv-threat", parents=[common],
                   help="PGD adversarial training of the combination-study classifier")

    train = sub.add_parser("train", parents=[common], help="Train one configured denoiser")
    train.add_argument("denoiser", help="Denoiser name from the config (e.g. filt_limg, advfilter)")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Sweep pipelines and write the report")
    evaluate.add_argument("--pipelines", nargs="+", help="Pipeline names (default: from config)")
    evaluate.add_argument("--iterations-sweep", action="store_true",
                          help="Add the fixed-ε varying-n block")
    evaluate.add_argument("--combination", action="store_true",
                          help="Also evaluate every denoiser in front of the adversarially trained classifier")

    reproduce = sub.add_parser("reproduce", parents=[common], help="Run a named preset end to end")
    reproduce.add_argument("profile", choices=PROFILES)
    reproduce.add_argument("--data-root", type=str, help="Root of the desk dataset folders")

    inspect = sub.add_parser("inspect", parents=[common], help="Kernel / uncertainty figure for one image")
    inspect.add_argument("what", choices=("kernels", "uncertainty"))
    inspect.add_argument("checkpoint", help="model.pt path or a stored denoiser name")
    inspect.add_argument("image", help="8-bit RGB image file")
    inspect.add_argument("--variant", help="Output variant (head_2, sl, m, ...)")
    inspect.add_argument("--epsilons", nargs="+", type=float, default=[0.0],
                         help="Attack the image at these strengths first (uncertainty only)")
    return parser


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        config.seed = args.seed
        config.attack.seed = args.seed
        config.training.seed = args.seed
        config.threat.train.seed = args.seed
        config.adv_threat.train.seed = args.seed
        config.evaluation.seed = args.seed
    if args.out:
        config.output = args.out
    if args.deterministic:
        config.deterministic = True
    if args.verbose:
        config.log.level = "DEBUG"
    return config


def run(args: argparse.Namespace) -> int:
    if args.command == "reproduce":
        config = load_profile(args.profile, args.data_root)
        config.apply_env_overrides()
    else:
        config = load_config(args.config)
    config = apply_overrides(config, args)
    setup_logging(config.log)
    seed_everything(config.seed, config.deterministic)
    logger.info(f"advfilter {args.command} (output {config.output})")

    experiment = Experiment(config, progress=logging.getLogger().isEnabledFor(logging.INFO))
    if args.command == "train-threat":
        experiment.threat()
    elif args.command == "train-adv-threat":
        experiment.adv_threat()
    elif args.command == "attack-gen":
        experiment.attack_data()
    elif args.command == "train":
        experiment.train(args.denoiser)
    elif args.command == "evaluate":
        pipelines = args.pipelines or experiment.configured_pipelines()
        experiment.evaluate(pipelines, args.iterations_sweep, args.combination)
    elif args.command == "reproduce":
        budget = SMOKE_BUDGET_SECONDS if args.profile == "smoke" else None
        checklist = experiment.reproduce(budget)
        print(checklist.frame().to_string(index=False))
    elif args.command == "inspect":
        path = experiment.inspect(args.what, args.checkpoint, args.image, args.variant, args.epsilons)
        print(path)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.version:
        from advfilter import __version__
        print(f"advfilter {__version__}")
        return 0
    if args.command is None:
        parser.print_help()
        return 2

    try:
        return run(args)
    except AdvFilterError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
