import os
from pathlib import Path

import pytest

CACHE = Path(__file__).resolve().parent.parent / ".fimex_cache"
os.environ.setdefault("FIMEX_CACHE", str(CACHE))

_criteria: list[str] = []


@pytest.fixture(scope="session")
def cache_dir() -> Path:
    return Path(os.environ["FIMEX_CACHE"])


@pytest.fixture
def report_line():
    """Record one acceptance line; echoed in the terminal summary."""
    def emit(line: str):
        _criteria.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
