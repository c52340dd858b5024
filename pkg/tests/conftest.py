import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deformflow.geometry import ScalarGrid, marching_cubes
from deformflow.synthetic import make_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sphere_grid(res=64, radius=0.4):
    return ScalarGrid.from_function(lambda x, y, z: radius - np.sqrt(x * x + y * y + z * z), res, -0.5, 0.5)


@pytest.fixture(scope="session")
def sphere_mesh():
    return marching_cubes(sphere_grid(64), 0.0)


@pytest.fixture(scope="session")
def bend_scene():
    return make_synthetic("bend", seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
