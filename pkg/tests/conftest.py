import numpy as np
import pytest
from hypothesis import settings, strategies as st

from confodom.se3 import Pose

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
unit_interval = st.floats(0, 1, allow_nan=False)


@st.composite
def poses(draw, max_angle=np.pi, max_t=20.0):
    axis = np.array(draw(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)))
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    angle = draw(st.floats(0, max_angle, allow_nan=False))
    t = draw(st.lists(st.floats(-max_t, max_t, allow_nan=False), min_size=3, max_size=3))
    return Pose.from_axis_angle(axis, angle, t)


vectors = st.lists(finite, min_size=3, max_size=3).map(np.array)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
