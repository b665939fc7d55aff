"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if "criterion" in props:
            _results[props["criterion"]] = (props["title"], report.outcome, props.get("measured", ""))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))
        item.user_properties.append(("title", m.args[1]))


@pytest.fixture
def measured(request):
    """Call with a short string to attach the measured value to the criterion line."""
    def record(text):
        request.node.user_properties.append(("measured", text))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, outcome, measured = _results[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {n:>2}: {status}  {title}"
        if measured:
            line += f"  [{measured}]"
        terminalreporter.write_line(line)
