import math

import pytest

from brwre.env_model import CountLaw, FiniteBroodLaw, GaussianFamily, MixtureEnvironment

SQRT_E = math.sqrt(math.e)


@pytest.fixture
def binary_gauss():
    """N = 2, displacements Normal(0, 1)."""
    return GaussianFamily()


@pytest.fixture
def unit_gauss():
    """Degenerate Gaussian model tuned so that theta = sigma_Q = 1."""
    return GaussianFamily(count_laws=[CountLaw((1, 2), (2 - SQRT_E, SQRT_E - 1))])


@pytest.fixture
def binary_zero():
    return MixtureEnvironment([FiniteBroodLaw.deterministic([0.0, 0.0])])


@pytest.fixture
def ternary_iid():
    """Degenerate finite model with a critical tilt: N = 2, zeta uniform on {-1, 0, 1}."""
    return MixtureEnvironment([FiniteBroodLaw.iid({2: 1.0}, {-1.0: 1 / 3, 0.0: 1 / 3, 1.0: 1 / 3})])


@pytest.fixture
def random_gauss():
    return GaussianFamily(count_laws=[CountLaw((2,), (1.0,)), CountLaw((1, 3), (0.5, 0.5))],
                          count_weights=[0.5, 0.5], mu_std=0.3, sigma_values=[0.8, 1.2],
                          sigma_weights=[0.5, 0.5])


@pytest.fixture
def two_law_mixture():
    l1 = FiniteBroodLaw([(0.2, (-2.0, 0.0, 1.0)), (0.8, (0.0, 1.0))], label="spread")
    l2 = FiniteBroodLaw([(0.5, (-1.0, 0.5)), (0.5, (-0.5, 0.0, 0.5))], label="mixed")
    return MixtureEnvironment([l1, l2], [0.4, 0.6])
