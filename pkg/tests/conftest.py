import numpy as np
import pytest

from msam import kernels


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run the test once per built kernel backend."""
    mod = kernels.get_backend(request.param)
    monkeypatch.setattr(kernels, "backend", mod)
    return request.param


@pytest.fixture
def f64():
    return np.float64
