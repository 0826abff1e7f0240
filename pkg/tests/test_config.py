"""Config validation: strict keys, presets, env seed override."""

import json

import pytest

from prediflow.config import (
    MotionDims,
    PrediFlowConfig,
    RefinerConfig,
    config_to_dict,
    desk_config,
    load_config,
    paper_scale_config,
)
from prediflow.errors import ConfigError


def test_desk_defaults():
    cfg = desk_config()
    assert (cfg.motion.T, cfg.motion.F, cfg.motion.tau) == (30, 120, 20)
    assert cfg.refiner.d == 64 and cfg.refiner.blocks == 4
    assert cfg.pipeline.N == 10 and cfg.pipeline.M == 10


def test_paper_scale_constants():
    cfg = paper_scale_config()
    assert (cfg.motion.T, cfg.motion.F) == (30, 120)
    assert cfg.refiner.d == 512 and cfg.refiner.blocks == 7
    assert cfg.pipeline.epochs == 1000
    assert cfg.pipeline.lr_init == pytest.approx(2.5e-4)
    assert cfg.pipeline.batch == 64
    assert cfg.pipeline.samples_per_epoch == 50000
    assert cfg.pipeline.warmup_epochs == 100
    assert cfg.pipeline.N == 50


def test_presets_differ_only_in_documented_constants():
    desk = config_to_dict(desk_config())
    paper = config_to_dict(paper_scale_config())
    assert desk["scenario"] == paper["scenario"]
    assert desk["motion"] == paper["motion"]
    diffs = set()
    for section in ("predictor", "refiner", "pipeline"):
        for key in desk[section]:
            if desk[section][key] != paper[section][key]:
                diffs.add(f"{section}.{key}")
    assert diffs == {
        "predictor.latent", "refiner.d", "refiner.blocks", "refiner.heads",
        "pipeline.N", "pipeline.epochs", "pipeline.samples_per_epoch",
        "pipeline.batch", "pipeline.warmup_epochs",
    }


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1, "bogus": 2}))
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps({"refiner": {"d": 32, "oops": True}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_overrides_merge(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5, "refiner": {"d": 32, "heads": 2}}))
    cfg = load_config(path)
    assert cfg.seed == 5
    assert cfg.refiner.d == 32
    assert cfg.refiner.blocks == 4  # untouched default
    assert cfg.scenario.seed == 5   # scenario seed follows run seed


def test_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PREDIFLOW_SEED", "99")
    cfg = load_config(None)
    assert cfg.seed == 99
    assert cfg.scenario.seed == 99
    monkeypatch.setenv("PREDIFLOW_SEED", "notanint")
    with pytest.raises(ConfigError):
        load_config(None)


def test_validation_errors():
    with pytest.raises(ConfigError):
        MotionDims(T=0)
    with pytest.raises(ConfigError):
        MotionDims(tau=200)
    with pytest.raises(ConfigError):
        RefinerConfig(d=30, heads=4)
    with pytest.raises(ConfigError):
        PrediFlowConfig(agg="median")
    with pytest.raises(ConfigError):
        PrediFlowConfig(alpha=-1.0)
    with pytest.raises(ConfigError):
        load_config({"scenario": {"trial_length": 100}})


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/path.json")
