import logging

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_matplotlib():
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


# acceptance reporting: tests marked criterion(n, title) get one summary line each
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.fixture
def detail(request):
    def add(text):
        request.node.user_properties.append(("detail", text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    notes = "; ".join(v for k, v in item.user_properties if k == "detail")
    _criteria[mark.args[0]] = (mark.args[1], rep.passed, notes, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, notes, secs = _criteria[n]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title} [{secs:.1f}s]"
        terminalreporter.write_line(line + (f"\n      {notes}" if notes else ""))
