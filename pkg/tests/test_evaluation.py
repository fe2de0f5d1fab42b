"""Tests for the evaluation harness."""

import math

import pandas as pd
import pytest
import torch

from advfilter.artifacts import ArtifactStore
from advfilter.attack import AttackSpec, ThreatModel
from advfilter.config import TrainConfig
from advfilter.errors import ConfigError, IntegrityError, MissingArtifactError
from advfilter.evaluation import (
    AttackCache,
    PipelineSpec,
    SweepResult,
    SweepSpec,
    build_adversarially_trained_classifier,
    combination_study,
    epsilon_key,
    evaluate_pipeline,
    expand_pipelines,
    spearman,
    uncertainty_statistics,
)
from advfilter.models import HeadConfig, ResidualClassifier, YNetDenoiser, build_denoiser


@pytest.fixture
def sweep() -> SweepSpec:
    return SweepSpec(epsilon_grid=(0.0, 0.01, 0.3), iteration_grid=(2,), images_per_cell=8)


@pytest.fixture
def cache(test_images) -> AttackCache:
    return AttackCache(test_images, seed=0, batch_size=4)


def test_expand_pipelines():
    assert expand_pipelines(["none", "multihead", "none"]) == [
        "none", "multihead_h1", "multihead_h2", "multihead_h3", "multihead_h4",
    ]
    with pytest.raises(ConfigError):
        expand_pipelines(["mystery"])


def test_sweep_cells_include_extra_cells_once():
    spec = SweepSpec(epsilon_grid=(0.01, 0.3), iteration_grid=(10,), extra_cells=((0.3, 10), (0.3, 30)))
    assert spec.cells() == [(0.01, 10), (0.3, 10), (0.3, 30)]
    with pytest.raises(ConfigError):
        SweepSpec(epsilon_grid=())


def test_epsilon_key_normalizes_float_noise():
    assert epsilon_key(0.1 + 0.2) == epsilon_key(0.3)


class TestAttackCache:
    def test_reuses_attacks_per_classifier(self, cache, threat):
        first = cache.get(threat, 0.3, 2)
        assert cache.get(threat, 0.3, 2) is first
        assert torch.equal(cache.get(threat, 0.0, 2), cache.clean)
        assert (first - cache.clean).abs().max() <= 0.3 + 1e-6

    def test_persists_through_store(self, tmp_path, test_images, threat):
        store = ArtifactStore(tmp_path)
        first = AttackCache(test_images, seed=0, store=store).get(threat, 0.01, 2)
        second_cache = AttackCache(test_images, seed=0, store=store)
        assert second_cache._from_store(threat, 0.01, 2) is not None
        assert torch.equal(second_cache.get(threat, 0.01, 2), first)


class TestEvaluatePipeline:
    def test_undefended_pipeline(self, threat, cache, sweep):
        result = evaluate_pipeline(PipelineSpec("none", threat), sweep, cache)
        assert result.accuracy_at(0.0, 2) == pytest.approx(threat.accuracy(cache.clean, cache.labels))
        assert result.epsilons(2) == [0.0, 0.01, 0.3]
        assert all(cell.total == 8 for cell in result.accuracy.values())
        assert result.quality[0.0].psnr == 100.0
        assert result.provenance["fingerprints"]["classifier"] == threat.fingerprint()

    def test_filtering_pipeline_records_statistics(self, threat, cache, sweep, backbone):
        denoiser = build_denoiser("u_filt", backbone, 3)
        result = evaluate_pipeline(PipelineSpec("filt_limg", threat, denoiser), sweep, cache)
        frame = result.frame()
        assert len(frame) == 3
        assert {"psnr", "ssim", "input_psnr", "input_ssim", "mean_uncertainty"} <= set(frame.columns)
        assert frame["ssim"].between(-1.0, 1.0).all()
        assert not frame["mean_uncertainty"].isna().any()

    def test_ynet_pipeline_records_weights(self, threat, cache, sweep, backbone):
        denoiser = YNetDenoiser(backbone, HeadConfig(filter_size=3))
        result = evaluate_pipeline(PipelineSpec("advfilter", threat, denoiser, "fused"), sweep, cache)
        stats = result.statistics[0.3]
        assert {"mean_uncertainty", "mean_uncertainty_sl", "mean_uncertainty_m", "mean_weight"} <= set(stats)
        assert stats["mean_uncertainty"] == pytest.approx(stats["mean_uncertainty_sl"])
        assert 0.0 <= stats["mean_weight"] <= 1.0
        assert not result.frame()["mean_uncertainty"].isna().any()

    def test_shared_attacks_across_pipelines(self, threat, cache, sweep, backbone):
        evaluate_pipeline(PipelineSpec("none", threat), sweep, cache)
        cached = dict(cache._memory)
        evaluate_pipeline(PipelineSpec("add_limg", threat, build_denoiser("u_add", backbone)), sweep, cache)
        assert cache._memory.keys() == cached.keys()

    def test_fingerprint_mismatch(self, threat, cache, sweep, backbone):
        pipe = PipelineSpec("filt_limg", threat, build_denoiser("u_filt", backbone), expected_fingerprint="0" * 64)
        with pytest.raises(IntegrityError):
            evaluate_pipeline(pipe, sweep, cache)

    def test_too_few_images(self, threat, cache):
        with pytest.raises(ConfigError):
            evaluate_pipeline(PipelineSpec("none", threat), SweepSpec((0.0,), (2,), 9), cache)

    def test_result_survives_json(self, threat, cache, sweep):
        result = evaluate_pipeline(PipelineSpec("none", threat), sweep, cache)
        restored = SweepResult.from_dict(result.to_dict())
        assert restored.accuracy_at(0.3, 2) == result.accuracy_at(0.3, 2)
        assert restored.quality.keys() == result.quality.keys()
        with pytest.raises(MissingArtifactError):
            restored.accuracy_at(0.5, 2)


def test_combination_study(threat, cache, backbone):
    torch.manual_seed(1)
    other = ThreatModel(ResidualClassifier(num_classes=4, width=4), 4)
    study = combination_study(
        {"none": (None, None), "filt_limg": (build_denoiser("u_filt", backbone, 3), None)},
        {"clean": threat, "adversarial": other},
        SweepSpec((0.0, 0.3), (2,), 8),
        cache,
        iteration_epsilon=0.3,
        iteration_sweep=(2, 3),
    )
    assert set(study.results) == {
        ("none", "clean"), ("filt_limg", "clean"), ("none", "adversarial"), ("filt_limg", "adversarial"),
    }
    block = study.iteration_block()
    assert len(block) == 8
    assert set(block["iterations"]) == {2, 3}
    assert study.results[("none", "adversarial")].classifier == "adversarial"


class TestUncertainty:
    def test_statistics_frame(self, threat, cache, backbone):
        frame = uncertainty_statistics(build_denoiser("u_filt", backbone, 3), threat, cache, (0.01, 0.3), 2)
        assert len(frame) == 16
        assert sorted(frame["epsilon"].unique()) == [0.01, 0.3]
        assert -1.0 <= spearman(frame) <= 1.0

    def test_additive_has_no_kernels(self, threat, cache, backbone):
        with pytest.raises(ConfigError):
            uncertainty_statistics(build_denoiser("u_add", backbone), threat, cache, (0.3,), 2)

    def test_spearman(self):
        frame = pd.DataFrame({"epsilon": [0.0, 0.1, 0.2, 0.3], "mean_uncertainty": [1.0, 2.0, 5.0, 9.0]})
        assert spearman(frame) == pytest.approx(1.0)
        assert math.isnan(spearman(frame.iloc[:1]))


def test_adversarially_trained_classifier(images, test_images, threat):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=1, seed=0)
    robust, report = build_adversarially_trained_classifier(
        images, AttackSpec(2, 0.03), cfg, num_classes=4, width=4, reference=threat, holdout=test_images,
    )
    assert robust.fingerprint() != threat.fingerprint()
    assert 0.0 <= report.extra["robust_accuracy"] <= 1.0
    assert robust.provenance["adversarial"]["epsilon"] == 0.03
    robustness = report.extra["robustness"]
    assert robustness["required_gain"] == 0.2
    assert robustness["gain"] == pytest.approx(robustness["robust_accuracy"] - robustness["reference_robust_accuracy"])
    assert robustness["meets_required_gain"] == (robustness["gain"] >= 0.2)
    assert robust.provenance["robustness"] == robustness


def test_robustness_shortfall_reaches_sweep_result(threat, cache, sweep):
    threat.provenance["robustness"] = {"epsilon": 0.03, "gain": 0.05, "required_gain": 0.2,
                                       "meets_required_gain": False}
    result = evaluate_pipeline(PipelineSpec("none", threat, classifier_label="adversarial"), sweep, cache)
    assert result.provenance["classifier_robustness"]["meets_required_gain"] is False
