import numpy as np
import pytest

from vicl import autodiff


@pytest.fixture(autouse=True)
def finite_checks():
    """Run every test with NaN/Inf scanning enabled (off in benchmarks)."""
    autodiff.set_finite_checks(True)
    yield
    autodiff.set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
