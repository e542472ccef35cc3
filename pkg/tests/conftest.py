import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# keep property tests deterministic across runs
settings.register_profile("deterministic", derandomize=True, deadline=None)
settings.load_profile("deterministic")

_CRITERIA: dict[int, str] = {}
_RESULTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n, desc): tie a test to one acceptance criterion")


def pytest_runtest_makereport(item, call):
    if call.when != "call":
        return
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    _CRITERIA[n] = marker.args[1] if len(marker.args) > 1 else item.name
    outcome = "PASS" if call.excinfo is None else "FAIL"
    # a criterion spread over several tests fails if any of them fails
    if _RESULTS.get(n) != "FAIL":
        _RESULTS[n] = outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {n:2d}: {_RESULTS[n]}  {_CRITERIA[n]}")
