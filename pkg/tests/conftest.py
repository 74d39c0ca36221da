"""Shared fixtures and the acceptance summary hook."""

from __future__ import annotations

import sys
from pathlib import Path

# test-only helper modules (md5_reference, oracles) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def record_acceptance(criterion: str, ok: bool = True) -> None:
    _ACCEPTANCE_RESULTS.append((criterion, ok))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion, ok in _ACCEPTANCE_RESULTS:
        tr.write_line(("PASS  " if ok else "FAIL  ") + criterion)
