import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_bump_sampler(center, sigma, amplitude=1.0):
    """Smooth compactly-concentrated test density."""
    center = np.asarray(center, dtype=float)

    def sampler(points):
        d = points - center
        return amplitude * np.exp(-0.5 * np.sum((d / sigma) ** 2, axis=1))

    return sampler
