import pytest

_criterion_lines: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, name): acceptance criterion; outcome is printed in the "
        "terminal summary as one pass/fail line per criterion",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and rep.when == "call":
        num, name = marker.args
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _criterion_lines[num] = f"criterion {num} ({name}): {status}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_criterion_lines):
            terminalreporter.line(_criterion_lines[num])
