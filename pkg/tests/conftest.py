"""Surface the acceptance checklist in any pytest run.

The tests in test_acceptance.py print one [criterion N] line each, but
pytest's capture swallows passing-test stdout.  These hooks collect the
lines from the captured sections and replay them as a summary block at
the end of the run, so the release checklist is visible without -s.
"""

import re

_CRITERION_LINE = re.compile(r"^\[criterion \d+\] (?:PASS|FAIL).*$", re.MULTILINE)
_checklist: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for section, text in report.sections:
        if "stdout" in section:
            _checklist.extend(m.group(0) for m in _CRITERION_LINE.finditer(text))


def pytest_terminal_summary(terminalreporter):
    if not _checklist:
        return
    terminalreporter.section("acceptance checklist")
    for line in sorted(_checklist):
        terminalreporter.line(line)
