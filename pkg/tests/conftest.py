"""Collects acceptance-criterion outcomes and prints them after the run."""

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


class Recorder:
    def __call__(self, number: int, title: str, passed: bool, detail: str) -> None:
        _RESULTS[number] = (title, bool(passed), detail)
        print(f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")


@pytest.fixture(scope="session")
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
