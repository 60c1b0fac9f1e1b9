import numpy as np
import pytest

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """``criterion(id, ok, detail)`` prints and records one acceptance line."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(cid, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
