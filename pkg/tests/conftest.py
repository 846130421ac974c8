import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from scanformer import autodiff as ad  # noqa: E402

# one "PASS|FAIL|INFO criterion N: ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def float64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report_criterion():
    def record(number, title, ok, detail, informational=False):
        status = "INFO" if informational else ("PASS" if ok else "FAIL")
        line = f"{status} criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
