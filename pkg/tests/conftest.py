import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from rlvr3d.geometry import Box9DoF

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
sizes = st.floats(0.1, 3, allow_nan=False, allow_infinity=False)
angles = st.floats(-math.pi, math.pi, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    return Box9DoF(draw(finite), draw(finite), draw(finite), draw(sizes), draw(sizes), draw(sizes),
                   draw(angles), draw(angles), draw(angles))


@st.composite
def near_boxes(draw):
    """Pairs of boxes whose centers are close enough to overlap often."""
    a = draw(boxes())
    dx, dy, dz = (draw(st.floats(-1, 1)) for _ in range(3))
    b = Box9DoF(a.center_x + dx, a.center_y + dy, a.center_z + dz, draw(sizes), draw(sizes),
                draw(sizes), draw(angles), draw(angles), draw(angles))
    return a, b


def random_box(rng, center=2.0, size=(0.2, 2.0)):
    return Box9DoF(*rng.uniform(-center, center, 3), *rng.uniform(*size, 3),
                   *rng.uniform(-math.pi, math.pi, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance verdicts -------------------------------------------------------

_VERDICTS: dict[int, str] = {}


class Verdict:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def check(self, ok: bool, detail: str):
        _VERDICTS[self.number] = f"{'PASS' if ok else 'FAIL'} criterion {self.number:>2} ({self.title}): {detail}"
        assert ok, detail


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    yield Verdict(number, title)
    # a test that raised before reaching check() still gets a line
    _VERDICTS.setdefault(number, f"FAIL criterion {number:>2} ({title}): raised before completing")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
