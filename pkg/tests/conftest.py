import math

import pytest

from saimc.adjoint import solve_adjoint
from saimc.scene import build_scene


@pytest.fixture(scope="session")
def cos3_scene():
    return build_scene("cos3", h=0.05, mfp=4.0)


@pytest.fixture(scope="session")
def cos3_adjoint(cos3_scene):
    return solve_adjoint(cos3_scene)


@pytest.fixture(scope="session")
def flat_scene():
    return build_scene("flat", h=0.05, mfp=math.inf)


@pytest.fixture(scope="session")
def flat_adjoint(flat_scene):
    return solve_adjoint(flat_scene)
