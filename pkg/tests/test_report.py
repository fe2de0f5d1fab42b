"""Tests for report tables, figures and the bundle manifest."""

import json

import numpy as np
import pandas as pd
import pytest
import torch

from advfilter.errors import ShapeError
from advfilter.evaluation import AttackCache, Cell, SweepResult
from advfilter.imaging import QualityReport
from advfilter.models import HeadConfig, YNetDenoiser, build_denoiser
from advfilter.report import (
    accuracy_table,
    collect_uncertainty_strip,
    kernel_logits,
    label_of,
    plot_uncertainty_strip,
    quality_table,
    render_kernel_figure,
    render_report,
    robustness_warnings,
)


def _result(pipeline: str, accuracies: dict[float, float], classifier: str = "clean") -> SweepResult:
    result = SweepResult(pipeline=pipeline, classifier=classifier)
    for eps, acc in accuracies.items():
        result.accuracy[(eps, 10)] = Cell(int(acc * 100), 100)
        result.quality[eps] = QualityReport(30.0 + acc, 0.9)
        result.input_quality[eps] = QualityReport(25.0, 0.8)
    result.provenance = {"pipeline": pipeline}
    return result


@pytest.fixture
def results() -> list[SweepResult]:
    return [
        _result("filt_limg", {0.0: 0.9, 0.01: 0.7, 0.3: 0.4}),
        _result("none", {0.0: 0.9, 0.01: 0.2, 0.3: 0.0}),
        _result("advfilter", {0.0: 0.9, 0.01: 0.8, 0.3: 0.6}),
    ]


def test_accuracy_table_order_and_values(results):
    table = accuracy_table(results, 10)
    assert list(table.index) == [label_of("none"), label_of("filt_limg"), label_of("advfilter")]
    assert list(table.columns) == ["0", "0.01", "0.3"]
    assert table.loc[label_of("advfilter"), "0.3"] == pytest.approx(0.6)


def test_quality_table_uses_input_quality_for_undefended(results):
    table = quality_table(results, "psnr")
    assert table.loc[label_of("none"), "0.01"] == 25.0
    assert table.loc[label_of("filt_limg"), "0.01"] == pytest.approx(30.7)


def test_render_report(tmp_path, results):
    uncertainty = {"filt_limg": pd.DataFrame({"epsilon": [0.01, 0.3], "mean_uncertainty": [1.0, 2.0]})}
    manifest_path = render_report(results, tmp_path / "report", uncertainty=uncertainty)
    manifest = json.loads(manifest_path.read_text())
    assert "tables/accuracy_n10.csv" in manifest["files"]
    assert "plots/accuracy_n10.png" in manifest["files"]
    assert "tables/psnr.txt" in manifest["files"]
    assert manifest["uncertainty_spearman"]["filt_limg"] == pytest.approx(1.0)
    assert len(manifest["results"]) == 3
    assert (tmp_path / "report" / "tables" / "cells.csv").exists()


def _short_of_gain(result: SweepResult) -> SweepResult:
    result.provenance["classifier_robustness"] = {"epsilon": 0.03, "gain": 0.05, "required_gain": 0.2,
                                                  "meets_required_gain": False}
    return result


def test_robustness_warnings_once_per_classifier():
    short = [_short_of_gain(_result(p, {0.0: 0.9}, "adversarial")) for p in ("none", "filt_limg")]
    warnings = robustness_warnings(short + [_result("none", {0.0: 0.9})])
    assert len(warnings) == 1
    assert warnings[0].startswith("adversarial classifier")
    assert "+0.050" in warnings[0]


def test_render_report_lists_robustness_warnings(tmp_path, results):
    results.append(_short_of_gain(_result("none", {0.0: 0.9, 0.01: 0.5}, "adversarial")))
    manifest = json.loads(render_report(results, tmp_path / "report").read_text())
    assert len(manifest["warnings"]) == 1
    assert "adversarial" in manifest["warnings"][0]


def test_render_report_needs_results(tmp_path):
    with pytest.raises(ValueError):
        render_report([], tmp_path)


def test_uncertainty_strip(tmp_path):
    columns = [(eps, np.zeros((8, 8, 3), dtype=np.uint8), np.full((8, 8), eps)) for eps in (0.01, 0.3)]
    means = plot_uncertainty_strip(columns, tmp_path / "strip.png", "u")
    assert (tmp_path / "strip.png").exists()
    assert means["mean_uncertainty"].tolist() == pytest.approx([0.01, 0.3])


class TestKernelFigures:
    def test_kernel_logits_per_architecture(self, backbone):
        image = torch.rand(3, 20, 20)
        assert kernel_logits(build_denoiser("u_filt", backbone, 3), image).shape == (27, 20, 20)
        ynet = YNetDenoiser(backbone, HeadConfig(filter_size=3))
        assert kernel_logits(ynet, image, "m").shape == (27, 20, 20)
        with pytest.raises(ShapeError):
            kernel_logits(build_denoiser("u_add", backbone), image)

    def test_render_kernel_figure(self, tmp_path, backbone):
        path = render_kernel_figure(build_denoiser("u_multihead", backbone, 3), torch.rand(3, 16, 16),
                                    tmp_path / "kernels.png", variant="head_2")
        assert path.exists()

    def test_collect_uncertainty_strip(self, backbone, threat, test_images):
        cache = AttackCache(test_images, seed=0)
        columns = collect_uncertainty_strip(build_denoiser("u_filt", backbone, 3), threat, cache, (0.01, 0.3), 2)
        assert [c[0] for c in columns] == [0.01, 0.3]
        assert columns[0][1].shape == (16, 16, 3)
        assert columns[0][2].shape == (16, 16)
