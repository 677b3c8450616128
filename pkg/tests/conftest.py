import json
from pathlib import Path

import numpy as np
import pytest

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture
def toy_config():
    return str(CONFIG_DIR / "toy.json")


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict (or raw text) to a temp file and return its path."""
    def _write(doc, name="net.json"):
        path = tmp_path / name
        path.write_text(doc if isinstance(doc, str) else json.dumps(doc, indent=2))
        return str(path)
    return _write


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training and full-network checks")
