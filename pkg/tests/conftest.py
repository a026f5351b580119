import numpy as np
import pytest

from maskmlp.data import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    """600-student cohort shared by read-only tests."""
    return generate_synthetic(SynthConfig(n_students=600, n_schools=8, seed=1234))


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
