import numpy as np
import pytest
from hypothesis import settings

from spatialvb.model import PriorSpec, SyntheticSpec, simulate_dataset
from spatialvb.spatial import MaternParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def small_dataset(kind="bernoulli", n=60, phi=0.3, seed=1, sigma2=1.0):
    spec = SyntheticSpec(n=n, matern=MaternParams(sigma2, phi, 0.5), kind=kind, seed=seed)
    return simulate_dataset(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def prior2():
    return PriorSpec.default(2)
