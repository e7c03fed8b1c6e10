import os
import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_VERDICTS = pytest.StashKey[list]()


class Criterion:
    """Collects one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, lines: list):
        self.lines = lines
        self.line = None

    def verdict(self, label: str, ok: bool, detail: str) -> None:
        self.line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        self.lines.append(self.line)
        # bypass capture so the line shows up live as well as in the summary
        sys.__stdout__.write("\n" + self.line + "\n")
        sys.__stdout__.flush()
        assert ok, self.line


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_VERDICTS, [])
    c = Criterion(lines)
    yield c
    if c.line is None:
        lines.append(f"FAIL  {request.node.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
