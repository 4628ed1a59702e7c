import numpy as np
import pytest

from defectgen.synthetic import build_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Small on-disk dataset shared by pipeline and CLI tests."""
    root = tmp_path_factory.mktemp("toyset") / "data"
    build_toy_dataset(root, classes=("widget",), n_normal=4, n_anomaly=10,
                      size=16, seed=0)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
