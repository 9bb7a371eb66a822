import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(n, title, passed, detail)``."""

    def record(n, title, passed, detail=""):
        _ACCEPTANCE.append((n, title, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
