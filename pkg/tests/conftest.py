import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("RESTT_DATA_DIR", "/root/data")) / "mnist"


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RESTT_LONG") == "1":
        return
    skip = pytest.mark.skip(reason="long-running; set RESTT_LONG=1")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "t10k-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR}")
    return MNIST_DIR
