import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad

from dacbio.phantom import DatasetConfig, generate_dataset


def quad_perimeter(a, b):
    """Independent oracle: arc length of an axis-aligned ellipse by adaptive quadrature."""
    return quad(lambda t: math.hypot(a * math.sin(t), b * math.cos(t)), 0, 2 * math.pi,
                epsabs=1e-12, epsrel=1e-12, limit=500)[0]


class TinyNet(torch.nn.Module):
    """Two-layer convolutional toy network with a sigmoid output."""

    def __init__(self, seed=0, channels=4):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = torch.nn.Conv2d(1, channels, 3, padding=1)
        self.c2 = torch.nn.Conv2d(channels, 3, 3, padding=1)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)

    def forward(self, x):
        return torch.sigmoid(self.c2(torch.tanh(self.c1(x))))


@pytest.fixture
def tiny_net():
    return TinyNet().double()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    cfg = DatasetConfig(he_train=8, lc_train=6, lc_test=4, he_test=2, seed=3)
    return generate_dataset(cfg, root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_checkpoint(small_dataset, tmp_path_factory):
    from dacbio.config import variant_config
    from dacbio.trainer import train

    cfg = variant_config("5", epochs=1, lr_milestones=(), input_shape=(64, 64), batch_size=4, sigma=1.0)
    return train(cfg, small_dataset, tmp_path_factory.mktemp("run"))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL/NOT RUN line per acceptance criterion."""

    def record(number, title, ok, detail=""):
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[ok]
        line = f"criterion {number} [{status}] {title}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
