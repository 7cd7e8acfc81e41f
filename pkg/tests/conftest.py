import numpy as np
import pytest

from eventfield.dataset import Rig, make_sequence
from eventfield.lie import PoseSE3, look_at
from eventfield.world import AnalyticScene, Box, Sphere, Trajectory, default_scene, default_trajectory

# small run settings for plumbing tests; numbers here carry no meaning
FAST_RUN = dict(init_iters=5, n_track_rays=128, n_ba_rays=256, n_event_rays=64, track_iters=2, ba_iters=2,
                levels=(4, 8), hidden=(16,), h_dim=4, crf_hidden=4)


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def rig():
    return Rig()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, scene):
    """10-frame default scene in all three modes."""
    out = tmp_path_factory.mktemp("ds10")
    make_sequence(scene, default_trajectory(10), ("normal", "blur", "dark"), out)
    return out


@pytest.fixture(scope="session")
def wall_scene():
    """A single checkered wall 2 m in front of a camera at the origin looking along +x."""
    room = Box(albedo=(0.8, 0.7, 0.6), checker=0.25, albedo2=(0.3, 0.4, 0.5), center=(0.0, 0.0, 0.0),
               half_size=(2.0, 1.5, 1.5), inverted=True)
    return AnalyticScene([room], 1.0, ((-2.05, -1.55, -1.55), (2.05, 1.55, 1.55)))


def facing(eye, target):
    return look_at(np.asarray(eye, float), np.asarray(target, float))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, echoed again after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
