import numpy as np
import pytest

from slimformer import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per kernel backend that is importable here."""
    with _backend.use(request.param):
        yield request.param
