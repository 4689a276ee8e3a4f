import pytest

from factorbench.factors import FactorSpace

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_space():
    return FactorSpace.from_cardinalities([4, 4], names=["a", "b"], ordered=[True, True])


@pytest.fixture
def small_space():
    return FactorSpace.from_cardinalities([2, 5, 6, 4], names=["cat", "u", "v", "w"],
                                          ordered=[False, True, True, True])
