import os
from pathlib import Path

import numpy as np
import pytest

from nnforget.data import ImageDataset

MNIST_CANDIDATES = [os.environ.get("NNFORGET_DATA_DIR"), "/root/data/mnist"]


def mnist_dir():
    for cand in MNIST_CANDIDATES:
        if cand and (Path(cand) / "train-images-idx3-ubyte").exists() or (
                cand and (Path(cand) / "train-images-idx3-ubyte.gz").exists()):
            return cand
    return None


@pytest.fixture(scope="session")
def mnist_data_dir():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found; set NNFORGET_DATA_DIR")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_dataset(n_per_class=20, n_classes=10, width=20, seed=0):
    """Linearly separable blobs: class c is centred on a random direction."""
    r = np.random.default_rng(seed)
    centres = r.uniform(0, 1, size=(n_classes, width))
    X = np.concatenate([np.clip(c + 0.05 * r.standard_normal((n_per_class, width)), 0, 1) for c in centres])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return ImageDataset(X, y)


@pytest.fixture
def toy():
    return toy_dataset()


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
