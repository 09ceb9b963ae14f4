import numpy as np
import pytest

from loraserve import _backend
from loraserve.atmm import DEFAULT_CONFIG, TilingTable

BACKENDS = ["python"] + (["cython"] if _backend.compiled is not None else [])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def table():
    return TilingTable.single(DEFAULT_CONFIG)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(num, passed, text):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {num:>2}: {text}"
        CRITERIA[num] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[num])
