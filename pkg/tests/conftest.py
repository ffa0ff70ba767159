import numpy as np
import pytest

from chop_enkf.lorenz96 import cached_climatology


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow scenario tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def clim_cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("clim-cache"))


@pytest.fixture(scope="session")
def clim40(clim_cache_dir):
    """The production-scale climatology; computed once per session."""
    return cached_climatology(n_l=40, n_steps=100_000, cache_dir=clim_cache_dir)
