import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from quadra import datasets

REAL_DATA_ENV = "QUADRA_DATA"


def _find_real_mnist():
    """Real MNIST directory, if one is available (env var or ./data)."""
    candidates = []
    env = os.environ.get(REAL_DATA_ENV)
    if env:
        candidates.append(env)
    candidates.append(os.path.join(os.path.dirname(__file__), "..", "data"))
    for d in candidates:
        img = os.path.join(d, datasets.MNIST_FILES["train"][0])
        if os.path.exists(img) or os.path.exists(img + ".gz"):
            return d
    return None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Directory with MNIST-format files: real when present, else synthetic."""
    real = _find_real_mnist()
    if real is not None:
        return real
    d = tmp_path_factory.mktemp("mnist_like")
    datasets.generate_mnist_like(str(d), train_n=12000, test_n=2400, seed=20240901)
    return str(d)


@pytest.fixture(scope="session")
def mnist_pair(mnist_dir):
    return datasets.load_dataset(mnist_dir, "mnist")


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cifar_like")
    datasets.generate_cifar10_like(str(d), train_n=600, test_n=200, seed=7)
    return str(d)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
