import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit_rows(rng, rows, cols):
    z = rng.normal(size=(rows, cols))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_labels(rng, m):
    """Random pair labels with at least one positive."""
    y = rng.choice([-1, 1], size=m)
    y[rng.integers(m)] = 1
    return y
