import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, shift=1.0):
    A = rng.standard_normal((n, n))
    return A.T @ A + shift * np.eye(n)
