import numpy as np
import pytest

from gevr.raster import make_folds
from gevr.synthetic import GeneratorConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    """16x16 grid, 120 days over 3 years, mildly noisy cross-term signal."""
    config = GeneratorConfig(
        rows=16, cols=16, n_days=120, years=(2000, 2001, 2002), noise_std=0.05
    )
    return generate_synthetic(config, seed=7)


@pytest.fixture(scope="session")
def small_fold(small_dataset):
    raster, _, _ = small_dataset
    return make_folds(raster.day_year)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
