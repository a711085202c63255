import hypothesis
import numpy as np
import pytest

from hymlab import bundles as bd
from hymlab import geometry as geo

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.load_profile("fast")

np.seterr(all="warn")

CONFIG_DIR = "configs"


@pytest.fixture(scope="session")
def torus64():
    return geo.build_torus(1j, 64)


@pytest.fixture(scope="session")
def torus32():
    return geo.build_torus(1j, 32)


@pytest.fixture(scope="session")
def sphere_mid():
    return geo.build_sphere(16, 32, 1.2)


@pytest.fixture(scope="session")
def sphere_fine():
    return geo.build_sphere(32, 64, 1.2)


@pytest.fixture(scope="session")
def trivial2(torus64):
    return bd.make_bundle("trivial", "torus", rank=2)
