import os
from pathlib import Path

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for the terminal summary and return the flag."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}"
        if detail:
            line += f" | {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def reference_cache() -> Path:
    path = Path(os.environ.get("MRLT_CACHE", Path(__file__).resolve().parent.parent / ".mrlt_cache"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
