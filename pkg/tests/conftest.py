import sys
from pathlib import Path

import numpy as np
import pytest

# make tests/ importable as a namespace for the shared helpers
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
