import numpy as np
import pytest
from hypothesis import settings

from mgrit_adjoint.models import LinearApp

# first calls pay for loading compiled kernels; timing is not what these tests check
settings.register_profile("repo", deadline=None)
settings.load_profile("repo")


@pytest.fixture
def half_app():
    """Scalar decay u -> u/2, with exact coarse operators."""
    return LinearApp([[0.5]], u0=[1.0], m=4)


@pytest.fixture
def rotation_app():
    """Small 2x2 linear system with a design-dependent source."""
    A = [[0.9, 0.1], [-0.2, 0.8]]
    B = [[1.0], [0.5]]
    return LinearApp(A, B=B, u0=[1.0, 0.5], m=2, coarse="rediscretize")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
