import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from kernel_model import CheckerboardSymbol, ModelSpec, SmoothOscillatingSymbol  # noqa: E402
from utils import set_verbose  # noqa: E402


@pytest.fixture(autouse=True)
def quiet():
    set_verbose(False)
    yield
    set_verbose(True)


@pytest.fixture
def cauchy_1d():
    return ModelSpec(d=1, alpha=1.0)


@pytest.fixture
def cauchy_2d():
    return ModelSpec(d=2, alpha=1.0)


@pytest.fixture
def checkerboard_1d():
    return ModelSpec(d=1, alpha=1.0, kappa1=1.0, kappa2=2.0, symbol=CheckerboardSymbol(1.0, 2.0))


@pytest.fixture
def smooth_1d():
    return ModelSpec(d=1, alpha=1.5, kappa1=1.0, kappa2=2.0, symbol=SmoothOscillatingSymbol(1.0, 2.0))
