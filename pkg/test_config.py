"""
Settings checks.
"""

import pytest

import config


def test_validate_config():
    assert config.validate_config() is True


def test_invalid_threshold(monkeypatch):
    monkeypatch.setattr(config, "Z_THRESHOLD", 0.0)
    with pytest.raises(ValueError, match="Invalid configuration"):
        config.validate_config()


def test_version_string():
    version = config.version_string()
    assert isinstance(version, str) and version


def test_presets_ship_with_the_code():
    assert (config.PRESET_DIR / "acceptance.json").exists()
