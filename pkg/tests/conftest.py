import pytest

from qan.params import bundled_scenario_path, load_scenario

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def exp1():
    return load_scenario(bundled_scenario_path("exp1_1x8"))


@pytest.fixture(scope="session")
def exp2():
    return load_scenario(bundled_scenario_path("exp2_dwdm"))


@pytest.fixture(scope="session")
def gpon64():
    return load_scenario(bundled_scenario_path("gpon64"))
