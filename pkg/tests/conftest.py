import os
from pathlib import Path

import numpy as np
import pytest

from infodrop.data import DATA_DIR_ENV, LabeledDataset, write_idx


def _mnist_files_present(root: Path) -> bool:
    d = root / "mnist" if (root / "mnist").is_dir() else root
    return any(d.glob("train-images*")) and any(d.glob("t10k-images*"))


def build_mnist_sample(out: Path, n_train: int = 4000) -> Path:
    """Write IDX files from the 5000-digit MNIST sample bundled with mlxtend.

    The sample is sorted by class, so it is shuffled with a fixed seed
    before the train/test split.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    d = out / "mnist"
    d.mkdir(parents=True, exist_ok=True)
    write_idx(d / "train-images-idx3-ubyte", x[:n_train])
    write_idx(d / "train-labels-idx1-ubyte", y[:n_train])
    write_idx(d / "t10k-images-idx3-ubyte", x[n_train:])
    write_idx(d / "t10k-labels-idx1-ubyte", y[n_train:])
    return out


@pytest.fixture(scope="session")
def data_root(tmp_path_factory) -> Path:
    """Raw-data root: $INFODROP_DATA_DIR when it holds MNIST, else the mlxtend sample."""
    env = os.environ.get(DATA_DIR_ENV)
    if env and _mnist_files_present(Path(env)):
        return Path(env)
    pytest.importorskip("mlxtend")
    return build_mnist_sample(tmp_path_factory.mktemp("infodrop_data"))


@pytest.fixture
def tiny_images():
    def make(n=12, shape=(1, 8, 8), seed=0, n_classes=10):
        rng = np.random.default_rng(seed)
        return LabeledDataset(rng.uniform(size=(n,) + shape), rng.integers(0, n_classes, n), n_classes=n_classes)

    return make


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance line and prints it."""

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[_ACCEPTANCE][n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
