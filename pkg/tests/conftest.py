from __future__ import annotations

import os

import pytest

# ablation flags are only honoured in test builds
os.environ.setdefault("BIENCLAVE_TEST_BUILD", "1")

from bienclave.fixture import build_fixture  # noqa: E402


@pytest.fixture
def fx():
    return build_fixture(debug=True)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one acceptance line; it is echoed now and in the run summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
