import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsefusion.geometry import Intrinsics, look_at
from sparsefusion.grid import AuxCodec, GridConfig
from sparsefusion.synthetic import AnalyticScene, Sphere

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_intr():
    return Intrinsics.from_fov(80, 60, 60.0, 0.1, 3.0)


@pytest.fixture
def sphere_scene():
    return AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.3)])


@pytest.fixture
def front_pose():
    """Camera 0.9 m in front of the origin looking at it."""
    return look_at((0.0, 0.0, -0.9), (0.0, 0.0, 0.0))


def make_grid_config(n=8, m=8, mode="weight", side=1.0):
    return GridConfig(n, m, (-side / 2,) * 3, side, aux=AuxCodec(mode))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report, printed at the end of the session
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
