"""Tests for the acceptance checklist."""

import pandas as pd
import pytest

from advfilter.acceptance import (
    Checklist,
    Criterion,
    check_attack,
    check_clean_accuracy,
    check_combination,
    check_filtering_beats_additive,
    check_gradient,
    check_operators,
    check_protocol,
    check_uncertainty,
    evaluate_acceptance,
)
from advfilter.attack import AttackDataset, build_attack_dataset
from advfilter.evaluation import Cell, CombinationStudy, SweepResult, epsilon_key


def _result(pipeline: str, accuracies: dict[float, float], n: int = 10) -> SweepResult:
    result = SweepResult(pipeline=pipeline, classifier="clean")
    for eps, acc in accuracies.items():
        result.accuracy[(epsilon_key(eps), n)] = Cell(round(acc * 1000), 1000)
    return result


def test_operator_oracles_pass():
    criterion = check_operators(instances=6)
    assert criterion.passed, criterion.detail
    assert criterion.number == 1


def test_gradient_check_passes():
    criterion = check_gradient(instances=2)
    assert criterion.passed, criterion.detail


def test_checklist_status_and_files(tmp_path):
    checklist = Checklist()
    checklist.add(Criterion(2, "b", False, "broken"))
    checklist.add(Criterion(1, "a", True))
    checklist.add(Criterion(3, "c", None, "no data"))
    assert not checklist.passed
    assert checklist.frame()["status"].tolist() == ["PASS", "FAIL", "SKIP"]
    paths = checklist.write(tmp_path)
    assert [p.name for p in paths] == ["acceptance.csv", "acceptance.txt"]
    assert "SKIP" in (tmp_path / "acceptance.txt").read_text()


def test_skipped_criteria_do_not_fail():
    checklist = Checklist([Criterion(1, "a", True), Criterion(2, "b", None)])
    assert checklist.passed


class TestRunChecks:
    def test_filtering_beats_additive(self):
        results = {
            "filt_limg": _result("filt_limg", {0.01: 0.8, 0.3: 0.6}),
            "add_limg": _result("add_limg", {0.01: 0.5, 0.3: 0.3}),
        }
        assert check_filtering_beats_additive(results, 10).passed
        results["add_limg"] = _result("add_limg", {0.01: 0.8, 0.3: 0.6})
        assert check_filtering_beats_additive(results, 10).passed is False
        assert check_filtering_beats_additive({}, 10).status == "SKIP"

    def test_clean_accuracy(self):
        results = {
            "none": _result("none", {0.0: 0.9}),
            "filt_limg": _result("filt_limg", {0.0: 0.895}),
        }
        assert check_clean_accuracy(results, 10).passed
        results["advfilter"] = _result("advfilter", {0.0: 0.85})
        criterion = check_clean_accuracy(results, 10)
        assert criterion.passed is False
        assert "advfilter" in criterion.detail

    def test_attack_projection(self, attack_data):
        results = {"none": _result("none", {0.01: 0.5, 0.03: 0.3, 0.05: 0.1})}
        assert check_attack(results, 10, attack_data).passed

        shifted = [stack.clone() for stack in attack_data.adversarial]
        shifted[0] = (attack_data.clean + 0.2).clamp(0, 1)
        broken = AttackDataset(attack_data.clean, attack_data.labels, attack_data.epsilons, shifted,
                               attack_data.iterations)
        criterion = check_attack(results, 10, broken)
        assert criterion.passed is False
        assert criterion.detail.startswith("1 strengths")

    def test_attack_must_raise_the_loss(self, images, threat):
        results = {"none": _result("none", {0.01: 0.5, 0.05: 0.1})}
        strong = build_attack_dataset(threat, images, (0.3,), n=10, seed=0, batch_size=4, progress=False)
        criterion = check_attack(results, 10, strong, threat)
        assert criterion.passed, criterion.detail
        assert criterion.values["loss"][0.3] > criterion.values["clean_loss"]

        unchanged = AttackDataset(strong.clean, strong.labels, (0.3,), [strong.clean.clone()], 10)
        criterion = check_attack(results, 10, unchanged, threat)
        assert criterion.passed is False
        assert "loss not raised at ε=0.3" in criterion.detail

    def test_combination_fails_on_short_robustness_gain(self):
        results = {
            ("none", "adversarial"): _result("none", {0.01: 0.5, 0.3: 0.3}),
            ("filt_limg", "adversarial"): _result("filt_limg", {0.01: 0.7, 0.3: 0.5}),
        }
        study = CombinationStudy(results, (10,), 0.3, (10,))
        assert check_combination(study).passed

        results[("none", "adversarial")].provenance["classifier_robustness"] = {
            "epsilon": 0.03, "gain": 0.05, "required_gain": 0.2, "meets_required_gain": False,
        }
        criterion = check_combination(study)
        assert criterion.passed is False
        assert "gained only +0.050" in criterion.detail

    def test_uncertainty_trend(self):
        frame = pd.DataFrame({"epsilon": [0.0, 0.01, 0.1, 0.3], "mean_uncertainty": [1.0, 1.5, 2.0, 4.0]})
        assert check_uncertainty(frame).passed
        assert check_uncertainty(frame.assign(mean_uncertainty=[4.0, 2.0, 1.5, 1.0])).passed is False
        assert check_uncertainty(None).status == "SKIP"

    def test_protocol(self):
        counts = {"encoder": 6, "head_1": 2}
        reports = {
            "advfilter_stage1": {"ynet_fingerprint": "abc", "update_counts": counts,
                                 "expected_update_counts": counts},
            "advfilter": {"ynet_fingerprint": "abc"},
        }
        assert check_protocol(reports).passed
        reports["advfilter"] = {"ynet_fingerprint": "def"}
        assert check_protocol(reports).passed is False
        assert check_protocol({}, elapsed=700.0, budget=600.0).passed is False
        assert check_protocol({}).status == "SKIP"


def test_evaluate_acceptance_without_oracles():
    results = [
        _result("none", {0.0: 0.9, 0.01: 0.2}),
        _result("filt_limg", {0.0: 0.9, 0.01: 0.7}),
    ]
    checklist = evaluate_acceptance(results, 10, oracles=False)
    numbers = [c.number for c in checklist.criteria]
    assert numbers == list(range(3, 12))
    statuses = {c.number: c.status for c in checklist.criteria}
    assert statuses[7] == "PASS"
    assert statuses[9] == "SKIP"
    assert statuses[11] == "SKIP"
