import pytest
from pydantic import ValidationError

from config import PRESETS, MatchConfig


def test_preset_defaults_and_explicit_override():
    cfg = MatchConfig.from_dict({"preset": "full", "mpm_layers": "3"}, apply_env=False)
    assert cfg.c_coarse == PRESETS["full"]["c_coarse"]
    assert cfg.mpm_layers == 3


def test_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset=toy\ntheta_c=0.3\nweighted_softmax=false\nseed=7\n", encoding="utf-8")
    cfg = MatchConfig.from_file(str(path), apply_env=False)
    assert cfg.theta_c == 0.3 and cfg.weighted_softmax is False and cfg.seed == 7

    cfg.to_file(str(tmp_path / "out.cfg"))
    assert MatchConfig.from_file(str(tmp_path / "out.cfg"), apply_env=False) == cfg


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv("PRISM_SEED", "99")
    assert MatchConfig.from_dict({"seed": 1}).seed == 99
    assert MatchConfig.from_dict({"seed": 1}, apply_env=False).seed == 1


def test_env_seed_alias(monkeypatch):
    monkeypatch.setenv("SCALEMATCH_SEED", "42")
    assert MatchConfig.from_dict({"seed": 1}).seed == 42
    monkeypatch.setenv("PRISM_SEED", "99")
    assert MatchConfig.from_dict({"seed": 1}).seed == 99


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        MatchConfig.from_file("/nonexistent/scalematch.cfg")


@pytest.mark.parametrize(
    "values",
    [
        {"theta_p": 1.5},
        {"tau": 0},
        {"refine_window": 4},
        {"c_coarse": 30, "heads": 4},
        {"c_coarse": 12, "heads": 4},
        {"image_size": 100},
        {"unknown_key": 1},
    ],
)
def test_invalid_values_rejected(values):
    with pytest.raises(ValidationError):
        MatchConfig.from_dict(values, apply_env=False)
