import pytest

from geoq.model import QueueParams

# Lines collected by the acceptance suite and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_params():
    """N=18 at 90% utilization with a 5.3-day mean stay."""
    return QueueParams.from_utilization(18, 0.90, 1 / 5.3)
