import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from regiongeo.boxes import Box

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

coord = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
side = st.floats(1e-2, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    r, c = draw(coord), draw(coord)
    return Box(r, c, r + draw(side), c + draw(side))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with its measured values."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and rep.passed:
                continue
            props = dict(rep.user_properties)
            status = "PASS" if rep.passed else "FAIL"
            lines.append((props.get("criterion", rep.nodeid), f"{status}  {props.get('criterion', rep.nodeid)}"
                          f"  {props.get('detail', '')}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
