import sys

import pytest

from helpers import TOY_DIMS
from silentspeech.dataio import SyntheticTaskConfig
from silentspeech.model import init_params


@pytest.fixture
def toy_params():
    return init_params(TOY_DIMS, seed=3)


@pytest.fixture
def small_task():
    """Reduced synthetic task: 16x16 images, 8 steps, 4 sequences."""
    return SyntheticTaskConfig(n_sequences=4, seq_length=8, image_size=16, modes_per_input=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
