import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture()
def criterion():
    """``with criterion(n, text) as notes:`` records a pass/fail line for the
    summary; strings appended to ``notes`` are shown after ``text``."""
    @contextmanager
    def record(n, text):
        notes = []
        try:
            yield notes
        except BaseException as exc:
            why = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _CRITERIA[n] = f"criterion {n}: FAIL  {text}  [{'; '.join(notes + [why])}]"
            raise
        _CRITERIA[n] = f"criterion {n}: PASS  {text}  [{'; '.join(notes)}]"
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
