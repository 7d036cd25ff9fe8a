"""Shared pytest plumbing: acceptance criteria report their verdicts here."""

import pytest

_VERDICTS: dict[int, tuple[bool, str, float]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance verdict: ``verdict(n, ok, message, seconds)``.

    The line is printed immediately (visible with ``-s``) and repeated in the
    terminal summary, so it also shows in a plain ``pytest -v`` run.
    """
    def record(n: int, ok: bool, message: str, seconds: float) -> None:
        _VERDICTS[n] = (bool(ok), message, seconds)
        print(f"\n{_line(n, ok, message, seconds)}")
    return record


def _line(n, ok, message, seconds):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {message} ({seconds:.1f} s)"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        tr.write_line(_line(n, *_VERDICTS[n]))
    tr.write_line("")
    tr.write_line(f"{'criterion':>9}  {'result':<6}  {'seconds':>8}")
    for n in sorted(_VERDICTS):
        ok, _, seconds = _VERDICTS[n]
        tr.write_line(f"{n:>9}  {'PASS' if ok else 'FAIL':<6}  {seconds:>8.1f}")
