"""Tests for configuration loading, presets and overrides."""

import logging
from pathlib import Path

import pytest
import torch
import yaml

from advfilter.config import (
    DEFAULT_EPSILONS,
    SUPERIOR_EPSILONS,
    ExperimentConfig,
    LogConfig,
    TrainConfig,
    load_config,
    load_profile,
    resolve_device,
    setup_logging,
)
from advfilter.errors import ConfigError


def test_default_grid():
    assert len(DEFAULT_EPSILONS) == 12
    assert DEFAULT_EPSILONS[0] == 1e-4 and DEFAULT_EPSILONS[-1] == 0.5
    assert list(DEFAULT_EPSILONS) == sorted(DEFAULT_EPSILONS)
    assert set(SUPERIOR_EPSILONS) <= set(DEFAULT_EPSILONS)


def test_defaults_are_valid():
    config = ExperimentConfig()
    config.validate()
    assert set(config.denoisers) == {
        "add_lsem", "filt_lsem", "add_limg", "filt_limg", "filt_limg_star", "multihead", "advfilter",
    }
    assert config.dataset.test_source.split == "test"
    assert config.dataset.train_source.split == "train"


def test_from_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({
        "seed": 3,
        "attack": {"iterations": 5, "epsilons": ["1e-2", 0.3]},
        "training": {"epochs": 2, "batch_size": 8, "scheduler": "cosine"},
        "denoisers": {"mine": {"arch": "u_filt", "kernel_size": 3, "train_epsilons": [0.3]}},
        "dataset": {"test_source": {"kind": "synthetic", "num_classes": 4}},
    }))
    config = ExperimentConfig.from_yaml(path)
    assert config.seed == 3
    assert config.attack.epsilons == (0.01, 0.3)
    assert config.training.scheduler == "cosine"
    assert list(config.denoisers) == ["mine"]
    assert config.kernel_size_for("mine") == 3
    assert config.dataset.test_source.split == "test"
    assert config.dataset.test_source.num_classes == 4


@pytest.mark.parametrize(
    "data",
    [
        {"attack": {"epsilons": [1.5]}},
        {"attack": {"iterations": 0}},
        {"backbone": {"kernel_size": 4}},
        {"training": {"scheduler": "step"}},
        {"denoisers": {"x": {"arch": "u_unknown"}}},
        {"denoisers": {"x": {"arch": "u_filt", "train_epsilons": [0.2]}}},
        {"attack": {"epsilons": ["lots"]}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_non_mapping_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_env_overrides(tmp_path, monkeypatch):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 1\n")
    monkeypatch.setenv("ADVFILTER_SEED", "9")
    monkeypatch.setenv("ADVFILTER_DEVICE", "cpu")
    monkeypatch.setenv("LOG_LEVEL", "debug")
    config = load_config(path)
    assert config.seed == 9
    assert config.device == "cpu"
    assert config.log.level == "DEBUG"


def test_train_config_for_denoiser():
    config = ExperimentConfig()
    star = config.train_config_for("filt_limg_star")
    assert star.train_epsilons == SUPERIOR_EPSILONS
    assert star.include_clean is False
    assert config.train_config_for("filt_limg").train_epsilons is None


def test_train_config_round_trip_through_dict():
    cfg = TrainConfig(epochs=3, train_epsilons=(0.3,), epsilon_domains={"head_4": (0.3,)})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestProfiles:
    def test_smoke_profile(self):
        config = load_profile("smoke")
        assert config.attack.epsilons == (0.01, 0.3)
        assert config.evaluation.iteration_sweep == (10, 30)
        assert config.denoisers["filt_limg_star"].train_epsilons == (0.3,)
        assert config.dataset.test_source.split == "test"

    def test_desk_profile_paths(self, tmp_path):
        config = load_profile("desk-svhn", tmp_path)
        assert config.dataset.train_source.path == str(tmp_path / "svhn" / "train")
        assert config.dataset.train_source.kind == "folder"

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            load_profile("huge")


def test_resolve_device():
    assert resolve_device("cpu") == torch.device("cpu")
    assert isinstance(resolve_device("auto"), torch.device)
    with pytest.raises(ConfigError):
        resolve_device("toaster")


def test_setup_logging_writes_file(tmp_path):
    log_file = tmp_path / "run.log"
    setup_logging(LogConfig(level="INFO", file=str(log_file)))
    logging.getLogger("advfilter.test").info("hello")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "hello" in log_file.read_text()
    assert logging.getLogger("matplotlib").level == logging.WARNING
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()


def test_example_config_matches_defaults():
    config = ExperimentConfig.from_yaml(Path(__file__).parents[1] / "config.example.yaml")
    defaults = ExperimentConfig()
    assert config.attack.epsilons == defaults.attack.epsilons
    assert config.evaluation == defaults.evaluation
    assert config.denoisers.keys() == defaults.denoisers.keys()
    assert config.train_config_for("filt_limg_star") == defaults.train_config_for("filt_limg_star")


class TestEpsilonDomains:
    HEADS = {"head_1": ["1e-4"], "head_2": ["1e-3"], "head_3": [0.01], "head_4": [0.3]}

    def test_domains_reach_only_their_denoiser(self):
        config = ExperimentConfig.from_dict({
            "denoisers": {
                "multihead": {"arch": "u_multihead", "epsilon_domains": self.HEADS},
                "advfilter": {"arch": "y_dual"},
            },
        })
        assert config.train_config_for("multihead").epsilon_domains["head_4"] == (0.3,)
        assert config.train_config_for("advfilter").epsilon_domains == {}

    def test_shared_training_domains_rejected(self):
        with pytest.raises(ConfigError, match="per denoiser"):
            ExperimentConfig.from_dict({"training": {"epsilon_domains": self.HEADS}})

    def test_groups_must_exist_for_the_arch(self):
        with pytest.raises(ConfigError, match="head_1"):
            ExperimentConfig.from_dict(
                {"denoisers": {"advfilter": {"arch": "y_dual", "epsilon_domains": self.HEADS}}}
            )
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(
                {"denoisers": {"filt": {"arch": "u_filt", "epsilon_domains": {"sl": [0.3]}}}}
            )

    def test_domain_strengths_must_be_attacked(self):
        with pytest.raises(ConfigError, match="not in the attack grid"):
            ExperimentConfig.from_dict(
                {"denoisers": {"advfilter": {"arch": "y_dual", "epsilon_domains": {"sl": [0.2], "m": [0.3]}}}}
            )
