import numpy as np
import pytest

from spdistill.data import RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES, write_cifar_batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cifar_format_dir(tmp_path_factory):
    """A directory of well-formed CIFAR-10 binary batches with random
    pixels and uniform labels, for loader and CLI plumbing tests."""
    root = tmp_path_factory.mktemp("cifar_bin")
    gen = np.random.default_rng(99)
    for i, name in enumerate((*TRAIN_FILES, TEST_FILE)):
        labels = np.tile(np.arange(10, dtype=np.uint8), RECORDS_PER_FILE // 10)
        images = gen.integers(0, 256, size=(RECORDS_PER_FILE, 3, 32, 32), dtype=np.uint8)
        write_cifar_batch(root / name, images, labels)
    return root
