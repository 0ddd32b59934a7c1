"""Shared fixtures for the synthesis test suite"""
import logging
from pathlib import Path

import numpy as np
import pytest

import logger
from color_pipeline import CcmSet
from config import AppConfig
from helpers import write_png


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep developer shells from leaking overrides into tests"""
    for name in ("LOWLIGHT_CONFIG", "LOWLIGHT_LOG_LEVEL", "LOWLIGHT_LOG_DIR",
                 "LOWLIGHT_LOG_JSON", "LOWLIGHT_JOBS"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def app_config():
    return AppConfig()


@pytest.fixture
def context(app_config):
    return app_config.context()


@pytest.fixture
def default_ccms(app_config) -> CcmSet:
    return app_config.ccms


@pytest.fixture
def identity_ccms() -> CcmSet:
    return CcmSet(["identity"], [np.eye(3)])


@pytest.fixture
def image_dir(tmp_path) -> Path:
    """Four small 8-bit PNGs with distinct content"""
    directory = tmp_path / "clean"
    directory.mkdir()
    gen = np.random.default_rng(1234)
    for i in range(4):
        write_png(directory / f"img_{i:02d}.png", gen.integers(0, 256, size=(12, 16, 3), dtype=np.uint8))
    return directory


@pytest.fixture
def restore_logging():
    """Undo handlers installed by setup_logging"""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)
    logger.log_manager = None
