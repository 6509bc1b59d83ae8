import sys
from pathlib import Path

import pytest

# oracles.py sits next to the tests
sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
