import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("cpdyn", max_examples=60, deadline=None)
settings.load_profile("cpdyn")

from cpdyn.fields import make_builtin  # noqa: E402
from cpdyn.harness import BENCH_V0, BENCH_X0  # noqa: E402

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def experiment():
    return make_builtin("experiment", 1.0)


@pytest.fixture(scope="session")
def bench_state():
    return np.array(BENCH_X0), np.array(BENCH_V0)


@pytest.fixture
def record_acceptance():
    """Store one pass/fail line per acceptance criterion for the terminal summary."""

    def record(key, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}"
        ACCEPTANCE_LINES[key] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
