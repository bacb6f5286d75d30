import numpy as np
import pytest

from rigsfm import so3
from rigsfm.synthetic import SceneConfig, default_rig, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """Noise-free 8-unit, 2-slot loop with points; cheap enough for many tests."""
    cfg = SceneConfig(num_units=8, slots=default_rig(2), num_points=150, extent=30.0, seed=3)
    return generate_scene(cfg)


@pytest.fixture(scope="session")
def noisy_scene():
    cfg = SceneConfig(num_units=12, slots=default_rig(3), num_points=300, extent=40.0, pixel_noise_sigma=1.0,
                      rotation_noise_sigma=1.0, seed=7)
    return generate_scene(cfg)


def rot_z(theta):
    return so3.exp(np.array([0.0, 0.0, theta]))


# -- acceptance summary -----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(number, name, ok, detail)`` records one acceptance line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, name, ok, detail=""):
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
