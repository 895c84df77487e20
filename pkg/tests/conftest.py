import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "popcomp",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("popcomp")

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_line():
    """Record the one-line verdict of an acceptance criterion."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        verdict = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {verdict}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
