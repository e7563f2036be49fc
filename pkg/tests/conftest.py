import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("obsctl", deadline=None, max_examples=40)
settings.load_profile("obsctl")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
