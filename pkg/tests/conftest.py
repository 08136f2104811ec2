from pathlib import Path

import numpy as np
import pytest

from comrec.pgm import read_pgm

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (minutes)")


@pytest.fixture(scope="session")
def train_images():
    return [read_pgm(p) for p in sorted((FIXTURES / "train").glob("*.pgm"))]


@pytest.fixture(scope="session")
def heldout_images():
    return [read_pgm(p) for p in sorted((FIXTURES / "heldout").glob("*.pgm"))]


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


# acceptance-criterion number -> one summary line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
