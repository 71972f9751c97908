import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthbench import build_suite  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """The synthetic 3-scene benchmark, materialized once per session."""
    root = tmp_path_factory.mktemp("suite")
    return build_suite(str(root))


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(number, description): an acceptance criterion; its verdict "
        "is echoed as one line in the terminal summary.",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, description = marker.args
    if report.when == "setup" and report.skipped:
        status = "SKIP (optional, not run in CI)"
    elif report.when == "call":
        status = "PASS" if report.passed else "FAIL"
    else:
        return
    ACCEPTANCE_LINES.append(f"criterion {number}: {status} - {description}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.line(line)
    ACCEPTANCE_LINES.clear()
