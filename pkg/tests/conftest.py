"""Collects acceptance verdicts and prints one line per criterion at the end
of the session."""

import pytest

_VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, status: str, detail: str = "") -> None:
        _VERDICTS[criterion] = (status, detail)
        print(f"ACCEPTANCE {criterion}: {status} {detail}".rstrip())
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        status, detail = _VERDICTS[k]
        terminalreporter.write_line(f"ACCEPTANCE {k}: {status} {detail}".rstrip())
