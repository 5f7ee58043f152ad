from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def bench3(tmp_path):
    from helpers import copy_fixture

    return copy_fixture("bench3", tmp_path)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, elapsed, why = ACCEPTANCE_RESULTS[number]
        status = "PASS" if ok else f"FAIL ({why})"
        terminalreporter.write_line(f"criterion {number}: {status} [{elapsed:.2f}s] {title}")
