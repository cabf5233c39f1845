import numpy as np
import pytest

from debiformer import tensor as T


@pytest.fixture(autouse=True)
def _checked_mode():
    """Every op output is scanned for NaN/Inf during tests."""
    with T.checked(True):
        yield


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with np.errstate(all="raise", under="ignore"):
        yield
