import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ltnn.config import DatasetConfig
from ltnn.data import Dataset, generate_dataset


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """8 objects, 3 rotation conditions, 64x64; shared across the suite."""
    out = tmp_path_factory.mktemp("tiny_data")
    cfg = DatasetConfig(n_objects=8, image_size=64, n_conditions=3, seed=5)
    generate_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def tiny_train(tiny_data_dir):
    return Dataset(str(tiny_data_dir / "train.ltnd"))


@pytest.fixture(scope="session")
def tiny_test(tiny_data_dir):
    return Dataset(str(tiny_data_dir / "test.ltnd"))


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    """Faster variant for training-loop tests: 32x32, 2 conditions."""
    out = tmp_path_factory.mktemp("small_data")
    cfg = DatasetConfig(n_objects=5, image_size=32, n_conditions=2, seed=11)
    generate_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def small_train(small_data_dir):
    return Dataset(str(small_data_dir / "train.ltnd"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
