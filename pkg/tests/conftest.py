from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from emonext.tensor import default_dtype

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "fixtures" / "fer_mini.csv"

settings.register_profile("emonext", max_examples=30, deadline=None)
settings.load_profile("emonext")


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_path():
    return FIXTURE
