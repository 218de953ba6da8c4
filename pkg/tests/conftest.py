import numpy as np
import pytest

from lblmimo import _backend
from lblmimo.txmodel import RngStream, build_constellation


@pytest.fixture
def rng(request):
    # stable per-test stream
    key = sum(map(ord, request.node.name)) % 100_000
    return RngStream(1234, key).generator()


@pytest.fixture(params=[4, 16])
def const(request):
    return build_constellation(request.param)


@pytest.fixture
def qpsk():
    return build_constellation(4)


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    if request.param == "numba" and not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_backend, "BACKEND", request.param)
    return request.param


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
