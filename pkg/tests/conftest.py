import numpy as np
import pytest

from uanav.config import BUNDLED_MODEL
from uanav.predictor import load_ensemble


@pytest.fixture(scope="session")
def ensemble():
    return load_ensemble(BUNDLED_MODEL)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a one-line acceptance verdict; all verdicts are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number: int, passed: bool, detail: str, advisory: bool = False):
        verdict = "PASS" if passed else ("ADVISORY" if advisory else "FAIL")
        line = f"criterion {number:2d}: {verdict:8s} {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
