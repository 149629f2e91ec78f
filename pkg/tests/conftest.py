"""Shared fixtures and the --runslow switch for acceptance runs"""

import numpy as np
import pytest

from modules.camera import CameraPose, PinholeCamera


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return PinholeCamera(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture
def front_pose():
    """Camera at (0, 0, -2) looking at the origin"""
    return CameraPose.look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0])
