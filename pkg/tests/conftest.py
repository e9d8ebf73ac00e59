import numpy as np
import pytest

from davt.perf import tune_allocator

tune_allocator()

_LINES: list[str] = []


@pytest.fixture
def criterion_report(capsys):
    """Print one PASS/FAIL line per acceptance criterion, live and again at the end."""

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
