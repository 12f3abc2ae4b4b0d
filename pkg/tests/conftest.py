import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repro",
    derandomize=True,
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repro"))

_ACCEPTANCE: dict[int, list] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None:
        return
    _ACCEPTANCE.setdefault(crit, []).append((report.outcome, props.get("detail", "")))


@pytest.fixture
def criterion(request):
    """Tag a test with the acceptance criterion number it checks."""

    def tag(n, title):
        request.node.user_properties.append(("criterion", n))
        request.node.user_properties.append(("title", title))

    return tag


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    from test_acceptance import TITLES

    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(TITLES):
        runs = _ACCEPTANCE.get(n)
        if not runs:
            status = "NOT RUN"
        elif all(outcome == "passed" for outcome, _ in runs):
            status = "PASS"
        else:
            status = "FAIL"
        details = "; ".join(d for _, d in runs or [] if d)
        tr.write_line(f"[{status:7s}] criterion {n:2d}: {TITLES[n]}" + (f" | {details}" if details else ""))
