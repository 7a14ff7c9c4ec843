import functools

import pytest

from platoonsec.config import load_config
from platoonsec.engine import run_scenario


@functools.lru_cache(maxsize=None)
def bundled_run(name: str):
    """One cached run per bundled scenario; tests must not mutate the result."""
    return run_scenario(load_config(name), record_estimates=True)


@pytest.fixture
def run_bundled():
    return bundled_run


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
