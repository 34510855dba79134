import numpy as np
import pytest
import torch

from surds import data

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """4 writers x (6 genuine + 6 forged) synthetic corpus."""
    return data.generate_synthetic_corpus(4, 6, tmp_path_factory.mktemp("toy"), rng=7)


@pytest.fixture(scope="session")
def toy_ws(toy_manifest):
    return data.load_manifest(toy_manifest)
