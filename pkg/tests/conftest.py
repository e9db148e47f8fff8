"""Shared fixtures. The solver modules live flat at the project root, like main.py."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from market_model import lq_model  # noqa: E402
from rnn_policy import control_params, price_params  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the full reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def default_model():
    return lq_model()


@pytest.fixture
def deterministic_model():
    return lq_model(supply="deterministic")


@pytest.fixture
def zero_supply_model():
    return lq_model(supply="zero")


@pytest.fixture
def networks():
    rng = np.random.default_rng(7)
    return control_params(rng), price_params(rng)


def small_config(out_dir, **training) -> dict:
    """Tiny run config: K=5, 3 agents, 2 evaluation paths."""
    cfg = {
        "discretization": {"steps": 5},
        "training": {
            "iterations": 4,
            "epoch_size": 2,
            "n_train": 3,
            "n_test": 3,
            "mc_samples": 2,
            **training,
        },
        "output": {"dir": str(out_dir)},
        "seed": 11,
    }
    return cfg
