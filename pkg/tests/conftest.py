import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance-style runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
