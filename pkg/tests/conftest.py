import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance outcomes, keyed by criterion number, filled from test reports
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_ac" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    num = int(name[len("test_ac"):].split("_")[0])
    title = name.split("_", 2)[2].replace("_", " ")
    if report.when == "call" or report.failed or report.skipped:
        state = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _ACCEPTANCE.get(num)
        if prev is None or prev[1] == "PASS":
            _ACCEPTANCE[num] = (title, state)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, state = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {state}: {title}")
