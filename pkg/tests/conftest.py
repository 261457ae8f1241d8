import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nonlocal_feller.fdsolver import build_grid
from nonlocal_feller.library import square_nonlocal, unit_square

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def square_grid_64():
    return build_grid(unit_square(), 1 / 64)


@pytest.fixture(scope="session")
def nonlocal_grid_64():
    return build_grid(square_nonlocal(), 1 / 64)


@pytest.fixture(scope="session")
def nonlocal_grid_32():
    return build_grid(square_nonlocal(), 1 / 32)


def sine_mode(x, y):
    return np.sin(math.pi * x) * np.sin(math.pi * y)
