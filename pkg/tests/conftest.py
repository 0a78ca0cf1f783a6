import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


class Recorder:
    def __call__(self, number: int, name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS[number] = (name, bool(passed), detail)
        return bool(passed)


@pytest.fixture
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, passed, detail = _RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {name}: {detail}")
