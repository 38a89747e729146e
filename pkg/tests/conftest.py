import numpy as np
import pytest

from crossview import autodiff


@pytest.fixture(autouse=True)
def _debug_checks():
    """Run the whole suite with non-finite output checks enabled."""
    autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
