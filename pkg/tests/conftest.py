import numpy as np
import pytest

from expfbm import kernel as kn
from expfbm.functional import ModelParams


@pytest.fixture(scope="session")
def table64():
    return kn.build_kernel_table(0.7, 1.0, 64)


@pytest.fixture(scope="session")
def table128():
    return kn.build_kernel_table(0.7, 1.0, 128)


@pytest.fixture(scope="session")
def table256():
    return kn.build_kernel_table(0.7, 1.0, 256)


@pytest.fixture(scope="session")
def params():
    return ModelParams(a=0.0, sigma=1.0, hurst=kn.HurstParams(0.7, 1.0))


@pytest.fixture(scope="session")
def rng_seeds():
    return np.arange(20)
