import numpy as np
import pytest

_verdicts = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        _verdicts.setdefault(label, []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_verdicts, key=lambda s: (int(s.rstrip("abc")), s)):
        verdict = "PASS" if all(_verdicts[label]) else "FAIL"
        terminalreporter.write_line(f"criterion {label}: {verdict}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
