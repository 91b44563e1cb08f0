import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from s3net.data import scan_dataset  # noqa: E402
from s3net.fixtures import make_fixtures  # noqa: E402

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """2 scenes x 4 settings, 64x64."""
    root = tmp_path_factory.mktemp("fixtures_2x4")
    make_fixtures(root, scenes=2, settings=4, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def fixture_index(fixture_root):
    return scan_dataset(fixture_root)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
