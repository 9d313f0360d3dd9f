import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
MNIST5K = ROOT / "data" / "mnist5k"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist5k():
    from layerwise.data import load_mnist

    if not (MNIST5K / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST-5k fixture missing; run scripts/make_mnist5k.py to create {MNIST5K}")
    return load_mnist(MNIST5K)


@pytest.fixture(scope="session")
def mnist_run(mnist5k):
    """The desk-scale MNIST-5k greedy run (J=3, k=1, M=32, identity start on)."""
    from layerwise.config import from_preset
    from layerwise.trainer import train_greedy

    train, test = mnist5k
    cfg = from_preset("mnist-k1-reduced")
    net, results = train_greedy(train, cfg, test=test)
    return net, results, cfg


@pytest.fixture(scope="session")
def mnist_zero_epoch_run(mnist5k):
    from layerwise.config import from_preset
    from layerwise.trainer import train_greedy

    train, test = mnist5k
    cfg = from_preset("mnist-k1-reduced", epochs_per_layer=0)
    return train_greedy(train, cfg, test=test)
