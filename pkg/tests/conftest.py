import contextlib
import time

import pytest

# (number, title, passed, detail) for each acceptance check that ran
ACCEPTANCE = []


class Criterion:
    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.details = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """Context manager that times a check, records pass/fail and enforces its runtime limit."""

    @contextlib.contextmanager
    def run(number: int, title: str, limit_s: float):
        c = Criterion(number, title, limit_s)
        start = time.perf_counter()
        passed = False
        try:
            yield c
            elapsed = time.perf_counter() - start
            c.note(f"{elapsed:.1f}s of {limit_s:g}s")
            assert elapsed < limit_s, f"criterion {number} took {elapsed:.1f}s, limit {limit_s:g}s"
            passed = True
        except AssertionError as exc:
            c.note(str(exc).splitlines()[0] if str(exc) else "assertion failed")
            raise
        finally:
            ACCEPTANCE.append((number, title, passed, "; ".join(c.details)))
            print(_line(ACCEPTANCE[-1]))

    return run


def _line(entry) -> str:
    number, title, passed, detail = entry
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  ({detail})"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(ACCEPTANCE, key=lambda e: e[0]):
        terminalreporter.write_line(_line(entry))
