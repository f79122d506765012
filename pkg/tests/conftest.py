import pytest

from helpers import acceptance_lines, zero_unf


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def unf_zero_1d():
    return zero_unf(1)


@pytest.fixture
def unf_zero_2d():
    return zero_unf(2)
