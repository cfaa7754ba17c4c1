import contextlib
import time

import pytest

_RESULTS: list[tuple[bool, str, float, str]] = []


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion as a PASS/FAIL line.

    The body may store a short measurement summary in ``note["info"]``.
    """

    @contextlib.contextmanager
    def record(name: str):
        note = {"info": ""}
        t0 = time.perf_counter()
        try:
            yield note
        except BaseException:
            _RESULTS.append((False, name, time.perf_counter() - t0, note["info"]))
            print(f"FAIL  {name}  {note['info']}")
            raise
        _RESULTS.append((True, name, time.perf_counter() - t0, note["info"]))
        print(f"PASS  {name}  {note['info']}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for ok, name, secs, info in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  [{secs:.1f}s]  {info}".rstrip())
