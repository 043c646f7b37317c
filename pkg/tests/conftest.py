import pytest

# criterion number -> (title, [outcomes])
_CRITERIA: dict[int, tuple[str, list[bool]]] = {}
_NOTES: list[str] = []


@pytest.fixture
def acceptance_note():
    """Append a line to the acceptance summary printed after the run."""
    return _NOTES.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, (title, []))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry[1].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        ok = bool(outcomes) and all(outcomes)
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
    for line in _NOTES:
        tr.write_line(line)
