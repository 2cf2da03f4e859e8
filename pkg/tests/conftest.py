import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bpeq.estimation import EstimatorParams
from bpeq.network import build_network
from bpeq.scenarios import four_leg_document, grid_document

# lines printed at the end of the session, one per acceptance criterion
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def four_leg():
    return build_network(four_leg_document())


@pytest.fixture(scope="session")
def two_phase():
    """Four-leg intersection with left turns prohibited and one-lane approaches."""
    return build_network(four_leg_document(approach_lanes=1, left_turns=False))


@pytest.fixture(scope="session")
def grid():
    return build_network(grid_document())


@pytest.fixture
def params():
    return EstimatorParams()


@pytest.fixture(scope="session")
def single_link():
    return build_network({"links": [{"id": "L", "length": 500.0, "lanes": 1}]})
