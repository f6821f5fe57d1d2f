"""Shared fixtures and the acceptance-summary terminal hook."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dtmoco import phantom as ph
from dtmoco import selection
from dtmoco import stack as stk

settings.register_profile(
    "ci",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


# collected by tests/test_acceptance.py, printed after the run so the
# per-criterion verdicts survive pytest's output capture
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def make_small_stack(nx=6, ny=5, n_ave=2, seed=0):
    """Tiny 3-config stack (b0 + two directions) for plumbing tests."""
    rng = np.random.default_rng(seed)
    protocol = stk.Protocol(
        (
            stk.ProtocolEntry(0.0, None),
            stk.ProtocolEntry(150.0, (1.0, 0.0, 0.0)),
            stk.ProtocolEntry(150.0, (0.0, 1.0, 0.0)),
        )
    )
    data = rng.uniform(0.1, 1.0, (nx, ny, n_ave, 3))
    return stk.ImageStack(data, 1.0, protocol)


@pytest.fixture
def small_stack():
    return make_small_stack()


@pytest.fixture(scope="session")
def still_phantom():
    """Noiseless, motion-free, uncorrupted default phantom (117 frames)."""
    spec = ph.PhantomSpec(seed=7)
    stack, ann, truth = ph.make_phantom(spec)
    return spec, stack, ann, truth


@pytest.fixture(scope="session")
def still_roi(still_phantom):
    _, _, ann, _ = still_phantom
    return selection.donut_roi(ann)
