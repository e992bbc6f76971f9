import numpy as np
import pytest

from helpers import SHRUNK, perturbed
from ladder_rtb import qnet


@pytest.fixture
def shrunk_params():
    rng = np.random.default_rng(7)
    return perturbed(qnet.init_params(SHRUNK, rng), rng)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
