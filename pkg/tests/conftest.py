import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sddekit.config import build_model, bundled_config, load_config
from sddekit.model import SignedMatrixMeasure

settings.register_profile("sddekit", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sddekit")

E_INV = math.exp(-1.0)


def bundled(name, **overrides):
    return load_config(bundled_config(name)).with_overrides(**overrides)


def bundled_model(name, **overrides):
    return build_model(bundled(name, **overrides))


@pytest.fixture
def pure_delay():
    """-e^{-1} delta_{-1} on [-1, 0]."""
    return SignedMatrixMeasure(1.0, [(-1.0, [[-E_INV]])])


@pytest.fixture
def minus_dirac():
    return SignedMatrixMeasure(1.0, [(0.0, [[-1.0]])])


@pytest.fixture
def matrix_measure():
    return SignedMatrixMeasure(
        1.0,
        [(0.0, np.array([[-2.0, 0.3], [0.1, -1.5]])), (-1.0, np.array([[0.2, 0.0], [-0.3, 0.1]]))],
        [(-1.0, -0.5, np.array([[0.1, 0.2], [0.0, -0.2]]))],
    )


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
