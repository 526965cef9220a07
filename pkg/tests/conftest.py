import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import RUN_SLOW_TESTS, MatchConfig  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="set SCALEMATCH_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("PRISM_SEED", raising=False)
    monkeypatch.delenv("SCALEMATCH_SEED", raising=False)


@pytest.fixture
def toy_config():
    """Smallest configuration that still exercises every module."""
    return MatchConfig.from_dict(
        {"preset": "toy", "c_coarse": 32, "c_fine": 16, "heads": 2, "blocks_per_stage": 1, "image_size": 64,
         "num_pairs": 2, "steps": 2, "checkpoint_every": 1},
        apply_env=False,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    return torch.Generator().manual_seed(0)
