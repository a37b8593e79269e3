import os

import numpy as np
import pytest

_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Store and print one acceptance line; the summary repeats them in order."""
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    _CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def higgs_csv():
    path = os.environ.get("SIGSLEUTH_HIGGS_CSV")
    if not path or not os.path.isfile(path):
        pytest.skip("set SIGSLEUTH_HIGGS_CSV to the Higgs challenge CSV to run this check")
    return path
