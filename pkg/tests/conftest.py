import math

import numpy as np
import pytest

from rangeangle.radar import Target, paper_config


@pytest.fixture(scope="session")
def cfg():
    return paper_config()


@pytest.fixture(scope="session")
def single_target():
    return Target(a=1.0, phi=0.0, r=5.0, theta=math.radians(15.0))


@pytest.fixture(scope="session")
def two_targets():
    # reflectivity phases 3*pi/2 apart
    return [Target(1.0, 0.0, 5.0, math.radians(15.0)),
            Target(1.0, 1.5 * math.pi, 5.0, math.radians(-15.0))]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
