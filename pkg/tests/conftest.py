"""Shared test plumbing: the acceptance-criteria result table."""

_CRITERIA: list[tuple[str, str, bool]] = []


def record_criterion(tag: str, label: str, passed: bool) -> None:
    _CRITERIA.append((tag, label, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for tag, label, passed in _CRITERIA:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"CRITERION {tag:>3}: {status}  {label}")
