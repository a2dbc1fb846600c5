import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion.

    Usage: ``criterion(n, name, passed, detail)``; the line is printed at
    once and repeated in the terminal summary.
    """
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
