import os

# Keep compute pools small and steady: the test suite measures wall time in a
# few places and compares repeated runs bit-for-bit.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "2")
os.environ.setdefault("OMP_NUM_THREADS", "2")

import numpy as np
import pytest

from renalseg.engine import kernels


@pytest.fixture(scope="session", autouse=True)
def compiled_kernels():
    """Pay the one-time numba compilation cost up front."""
    kernels.warmup(np.float32)
    kernels.warmup(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
