import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oculus.synthetic import make_fixture  # noqa: E402


@pytest.fixture(scope="session")
def fixture_tree(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fixture"), n_items=10, seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
