import numpy as np
import pytest

from occreid import diffcore as dc


@pytest.fixture
def f64():
    with dc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(x, dtype=np.float64):
    return dc.Tensor(np.asarray(x, dtype=dtype), requires_grad=True, dtype=dtype)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
