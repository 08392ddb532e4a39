import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and print it immediately."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def acceptance_out(tmp_path_factory) -> Path:
    """Run directories for the empirical criteria; set RLINTERFERENCE_ACCEPTANCE_OUT to keep and resume them."""
    keep = os.environ.get("RLINTERFERENCE_ACCEPTANCE_OUT")
    return Path(keep) if keep else tmp_path_factory.mktemp("acceptance")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
