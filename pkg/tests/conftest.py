import numpy as np
import pytest

from layerpar.model import ResidualModel
from layerpar.tensor import SeededRng


def make_model(seed=0, raw_dim=2, d=4, d_h=6, C=3, L=4, scale=0.7, random_biases=True):
    model = ResidualModel.init(SeededRng(seed), raw_dim, d, d_h, C, L, scale)
    if random_biases:
        rng = SeededRng(seed, 99)
        for i, a in enumerate(model.arrays()):
            if a.ndim == 1:
                a[...] = rng.child(i).normal(a.shape, 0.3)
    return model


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture
def batch():
    rng = SeededRng(7)
    return rng.normal((5, 2)), np.array([0, 1, 2, 1, 0])


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
