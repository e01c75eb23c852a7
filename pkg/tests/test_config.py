"""Config loading, dotted overrides, validation messages."""

import json

import pytest

from compoundmotion.config import (
    ConfigError,
    RunConfig,
    apply_override,
    load_config,
)
from compoundmotion.masking import MaskWindow


def test_defaults_validate():
    cfg = load_config()
    assert cfg.seed == 0
    assert cfg.schedule.steps == 1000
    assert cfg.window.extract_until == 750 and cfg.window.apply_until == 250
    assert cfg.masking_enabled is True
    assert cfg.mask_window() == MaskWindow(750, 250, 1000)


def test_json_roundtrip():
    cfg = RunConfig()
    back = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg


def test_load_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 9, "schedule": {"steps": 40},
                                "window": {"extract_until": 30, "apply_until": 10}}))
    cfg = load_config(path)
    assert cfg.seed == 9
    assert cfg.schedule.steps == 40
    assert cfg.adapter.epochs == 40  # untouched sections keep defaults


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{seed:")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_unknown_field_named(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"sedd": 1}))
    with pytest.raises(ConfigError, match="sedd"):
        load_config(path)
    path.write_text(json.dumps({"schedule": {"step": 10}}))
    with pytest.raises(ConfigError, match="step"):
        load_config(path)


def test_overrides():
    cfg = apply_override(RunConfig(), "backbone.lr=0.01")
    assert cfg.backbone.lr == 0.01
    cfg = apply_override(cfg, "masking_enabled=false")
    assert cfg.masking_enabled is False
    cfg = apply_override(cfg, "data.per_action=7")
    assert cfg.data.per_action == 7
    assert isinstance(cfg.data.per_action, int)


def test_override_errors():
    with pytest.raises(ConfigError, match="key.path=value"):
        apply_override(RunConfig(), "backbone.lr")
    with pytest.raises(ConfigError, match="unknown config field"):
        apply_override(RunConfig(), "backbone.learning=1")
    with pytest.raises(ConfigError, match="unknown config section"):
        apply_override(RunConfig(), "spine.lr=1")
    with pytest.raises(ConfigError, match="expected an integer"):
        apply_override(RunConfig(), "seed=fast")
    with pytest.raises(ConfigError, match="expected a boolean"):
        apply_override(RunConfig(), "masking_enabled=maybe")


def test_validation_names_offending_field():
    with pytest.raises(ConfigError, match="branch_mode"):
        load_config(overrides=["branch_mode=parallel"])
    with pytest.raises(ConfigError, match="window"):
        load_config(overrides=["window.apply_until=900"])
    with pytest.raises(ConfigError, match="schedule.steps"):
        load_config(overrides=["schedule.steps=1"])
    with pytest.raises(ConfigError, match="backbone.lr"):
        load_config(overrides=["backbone.lr=-1"])
    with pytest.raises(ConfigError, match="x0_clamp"):
        load_config(overrides=["x0_clamp=0"])
    with pytest.raises(ConfigError, match="data.per_action"):
        load_config(overrides=["data.per_action=0"])


def test_window_must_fit_schedule():
    # shrinking the schedule without moving the window is a config error
    with pytest.raises(ConfigError, match="window"):
        load_config(overrides=["schedule.steps=100"])
    cfg = load_config(overrides=[
        "schedule.steps=100", "window.extract_until=75", "window.apply_until=25",
    ])
    assert cfg.mask_window() == MaskWindow(75, 25, 100)
