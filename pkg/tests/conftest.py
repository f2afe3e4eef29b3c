import numpy as np
import pytest
import torch

from catintell import baseline


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps float reductions reproducible between runs in one session
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    corpus, manifest = baseline.make_toy_corpus(20, 0, root, size=64)
    return corpus, manifest


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
