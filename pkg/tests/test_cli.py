"""Tests for the command line entry point."""

import logging

import numpy as np
import pytest
import torch
from PIL import Image

from advfilter.config import ExperimentConfig
from advfilter.main import apply_overrides, build_parser, main
from advfilter.models import BackboneConfig, build_denoiser


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("device: cpu\n")
    return path


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("advfilter ")


def test_no_command_prints_help():
    assert main([]) == 2


def test_unknown_profile_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["reproduce", "enormous"])
    assert info.value.code == 2


def test_unknown_denoiser_is_a_config_error(tmp_path, config_file):
    assert main(["train", "mystery", "-c", str(config_file), "--out", str(tmp_path / "run")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["train-threat", "-c", str(tmp_path / "absent.yaml")]) == 2


def test_missing_threat_checkpoint(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(f"device: cpu\nthreat:\n  checkpoint: {tmp_path / 'absent.pt'}\n")
    assert main(["train-threat", "-c", str(path), "--out", str(tmp_path / "run")]) == 3


def test_inspect_kernels(tmp_path, config_file, capsys):
    checkpoint = tmp_path / "model.pt"
    torch.save(build_denoiser("u_multihead", BackboneConfig(4, 8), 3).checkpoint_payload(), checkpoint)
    image = tmp_path / "cat.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (20, 20, 3), dtype=np.uint8)).save(image)

    out = tmp_path / "run"
    code = main(["inspect", "kernels", str(checkpoint), str(image), "--variant", "head_3",
                 "-c", str(config_file), "--out", str(out)])
    assert code == 0
    assert (out / "inspect" / "cat_kernels.png").exists()
    assert "cat_kernels.png" in capsys.readouterr().out


def test_inspect_rejects_unknown_variant(tmp_path, config_file):
    checkpoint = tmp_path / "model.pt"
    torch.save(build_denoiser("u_filt", BackboneConfig(4, 8), 3).checkpoint_payload(), checkpoint)
    image = tmp_path / "cat.png"
    Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(image)
    code = main(["inspect", "kernels", str(checkpoint), str(image), "--variant", "sl",
                 "-c", str(config_file), "--out", str(tmp_path / "run")])
    assert code == 2


@pytest.mark.slow
def test_reproduce_smoke(tmp_path, capsys):
    out = tmp_path / "smoke"
    assert main(["reproduce", "smoke", "--out", str(out), "--seed", "0"]) == 0
    assert (out / "report" / "acceptance.csv").exists()
    assert "PASS" in capsys.readouterr().out


def test_seed_flag_reaches_every_training_stage():
    args = build_parser().parse_args(["train", "filt_limg", "--seed", "5"])
    config = apply_overrides(ExperimentConfig(), args)
    assert config.attack.seed == config.training.seed == config.evaluation.seed == 5
    assert config.threat.train.seed == config.adv_threat.train.seed == 5
    assert config.dataset.seed == ExperimentConfig().dataset.seed
