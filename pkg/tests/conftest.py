import numpy as np
import pytest
import torch
from hypothesis import settings

from udareid.toydata import generate_toy_domains

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_domains():
    return generate_toy_domains(40, 30, 4, 3, (64, 32), seed=7)


@pytest.fixture(scope="session")
def small_domains():
    return generate_toy_domains(8, 6, 2, 2, (64, 32), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the session

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.outcome == "passed"
        prev = _CRITERIA.get(number, (title, True))
        _CRITERIA[number] = (title, prev[1] and passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}")
