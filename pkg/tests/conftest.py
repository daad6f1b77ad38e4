import warnings

import numpy as np
import pytest

from satconsensus.configs import config_path
from satconsensus.disagreement import build_disagreement_system
from satconsensus.sysmodel import load_model_file

warnings.filterwarnings("ignore", message="Solution may be inaccurate")


@pytest.fixture(scope="session")
def example1():
    return load_model_file(config_path("example1.yaml"))


@pytest.fixture(scope="session")
def example1_nogain():
    return load_model_file(config_path("example1_nogain.yaml"))


@pytest.fixture(scope="session")
def example1_system(example1):
    return build_disagreement_system(example1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
