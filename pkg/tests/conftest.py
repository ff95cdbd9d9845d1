import numpy as np
import pytest
import torch

from patternid.synthetic import generate_dataset


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    # 3 individuals x 12 renders, 64 px
    return generate_dataset(3, 12, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=8, w=8, c=3):
    return rng.random((h, w, c)).astype(np.float32)


def random_mask(rng, h=8, w=8, p=0.5):
    return (rng.random((h, w)) < p).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
