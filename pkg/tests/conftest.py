import re

import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error", "xfailed", "xpassed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines[int(m.group(1))] = f"criterion {m.group(1)}: {'PASS' if outcome in ('passed', 'xpassed') else 'FAIL'}  {detail}".rstrip()
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the acceptance summary."""

    def put(text: str) -> None:
        record_property("detail", text)

    return put
