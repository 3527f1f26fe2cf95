import contextlib
import time

import pytest

_CRITERIA: list[str] = []


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(label: str):
        out = _Outcome()
        start = time.perf_counter()
        try:
            yield out
        except BaseException as e:
            err = str(e).splitlines()[0] if str(e) else type(e).__name__
            msg = f"{out.detail}  [{err}]" if out.detail else err
            _CRITERIA.append(f"FAIL  {label}  ({time.perf_counter() - start:.1f}s)  {msg}")
            raise
        _CRITERIA.append(f"PASS  {label}  ({time.perf_counter() - start:.1f}s)  {out.detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
