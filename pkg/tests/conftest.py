import time

import pytest

SESSION_START = time.perf_counter()
_RESULTS: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, criterion: int, passed: bool, detail: str) -> None:
        _RESULTS[criterion] = (bool(passed), detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_collection_modifyitems(items):
    # the wall-clock criterion has to see every other test finish first
    last = [i for i in items if i.get_closest_marker("suite_timing")]
    items[:] = [i for i in items if i not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "suite_timing: runs after everything else")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_RESULTS):
        passed, detail = _RESULTS[criterion]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
