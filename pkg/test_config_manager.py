#!/usr/bin/env python3
"""
Tests for the parameter-file loader and its range checks.
"""

import logging

import pytest

from src.config_manager import DEFAULT_CONFIG, ConfigError, ConfigManager, config_hash, parse_config_text

logger = logging.getLogger(__name__)


def test_defaults_are_copied():
    config = ConfigManager()
    assert config.get("cva.h") == 0.03
    assert config.get("diffrates")["K2"] == 105.0
    assert config.get("missing.key", "fallback") == "fallback"
    assert config.get_int("run.grid_x") == 400
    assert config.get_int("run.grid_t") == 2000
    config.set("cva.h", 0.0)
    assert DEFAULT_CONFIG["cva"]["h"] == 0.03
    assert config.validate_config()


def test_parse_config_text():
    entries = parse_config_text("# comment\n\ncva.h = 0   # no default\npaths=5000\n")
    assert entries == {"cva.h": 0.0, "paths": 5000.0}
    with pytest.raises(ConfigError) as info:
        parse_config_text("cva.h = lots")
    assert info.value.key == "cva.h"
    with pytest.raises(ConfigError):
        parse_config_text("just words")
    with pytest.raises(ConfigError):
        parse_config_text("= 3")


def test_unscoped_keys_reach_every_block():
    config = ConfigManager()
    config.set("paths", 5000)
    assert config.get("coupled.paths") == 5000.0
    assert config.get("run.paths") == 5000.0
    config.set("r", 0.03)
    assert config.get("cva.r") == config.get("diffrates.r") == config.get("coupled.r") == 0.03
    with pytest.raises(ConfigError) as info:
        config.set("gamma", 1.0)
    assert info.value.key == "gamma"
    with pytest.raises(ConfigError):
        config.set("cva.kappa", 1.0)
    with pytest.raises(ConfigError):
        config.set("cva.h", "none")


def test_parameter_file(tmp_path):
    path = tmp_path / "params.txt"
    path.write_text("cva.h = 0\ncva.T = 3\n", encoding="utf-8")
    config = ConfigManager(str(path))
    assert config.get("cva.h") == 0.0
    assert config.get("cva.T") == 3.0
    with pytest.raises(ConfigError) as info:
        ConfigManager(str(tmp_path / "absent.txt"))
    assert info.value.key == "config"


@pytest.mark.parametrize("key, value", [
    ("cva.sigma", -0.2),
    ("cva.h", -0.01),
    ("run.grid_x", 401),
    ("run.paths", 1000.5),
    ("diffrates.R", 0.001),
    ("diffrates.K2", 90.0),
    ("asymptotic.levels", 1),
    ("coupled.order", 3),
    ("cva.T", 0.5),
])
def test_range_checks(key, value):
    config = ConfigManager()
    config.set(key, value)
    assert not config.validate_config()
    with pytest.raises(ConfigError) as info:
        config.require_valid()
    logger.info("rejected %s=%s: %s", key, value, info.value)


def test_hash_tracks_the_effective_configuration():
    config = ConfigManager()
    baseline = config.hash()
    assert baseline == config_hash(DEFAULT_CONFIG)
    assert len(baseline) == 64
    config.set("cva.h", 0.0)
    assert config.hash() != baseline
    config.reset_to_defaults()
    assert config.hash() == baseline
    assert config.get_all() == DEFAULT_CONFIG
