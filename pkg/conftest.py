import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(ROOT / "api"))

from app.db.architecture_text import parse_architecture  # noqa: E402
from app.db.idx import IMAGE_MAGIC, LABEL_MAGIC, encode_idx  # noqa: E402
from app.layers.model import DcgmmModel, init_model  # noqa: E402

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)

# F(2,2,2,2) on 4x4 gives 2x2 positions for the lower GMM layer, the top is global
SMALL_ARCH = "input 4 4 1 / F(2,2,2,2) / G(3) / F(2,2,1,1) / G(2)"
SMALL_ARCH_WITH_CLASSIFIER = SMALL_ARCH + " / C(3)"
CLI_ARCH = "input 8 8 1 / F(4,4,2,2) / G(4) / F(3,3,1,1) / G(3) / C(10)"


def mnist_dir():
    """Directory holding the raw MNIST IDX files, or None."""
    data_dir = os.environ.get("DCGMM_DATA_DIR")
    if not data_dir:
        return None
    path = Path(data_dir)
    if all((path / name).exists() for name in MNIST_FILES):
        return path
    return None


def pytest_collection_modifyitems(config, items):
    if mnist_dir() is not None:
        return
    skip = pytest.mark.skip(reason="DCGMM_DATA_DIR does not hold the MNIST IDX files")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)


def build_model(text: str, seed: int = 0) -> DcgmmModel:
    return init_model(parse_architecture(text), seed)


def write_idx(path: Path, array: np.ndarray, magic: int) -> Path:
    path.write_bytes(encode_idx(array, magic))
    return path


def write_dataset(directory: Path, pixels: np.ndarray, labels: np.ndarray, prefix: str = "data"):
    """IDX image/label pair from uint8 pixels (N, H, W) and integer labels."""
    images = write_idx(directory / f"{prefix}-images-idx3-ubyte", pixels, IMAGE_MAGIC)
    label_file = write_idx(directory / f"{prefix}-labels-idx1-ubyte", labels, LABEL_MAGIC)
    return images, label_file


def farthest_points(data: np.ndarray, k: int) -> np.ndarray:
    """Deterministic k-center seeding starting from the first row."""
    chosen = [0]
    distance = np.linalg.norm(data - data[0], axis=1)
    for _ in range(k - 1):
        chosen.append(int(np.argmax(distance)))
        distance = np.minimum(distance, np.linalg.norm(data - data[chosen[-1]], axis=1))
    return data[chosen].copy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return build_model(SMALL_ARCH, seed=3)


@pytest.fixture
def small_images(rng):
    return rng.uniform(0.0, 1.0, size=(12, 4, 4, 1))


@pytest.fixture
def tiny_idx(tmp_path):
    """30 random 8x8 images with labels cycling through 0-9."""
    gen = np.random.default_rng(99)
    pixels = gen.integers(0, 256, size=(30, 8, 8), dtype=np.uint8)
    labels = (np.arange(30) % 10).astype(np.uint8)
    images, label_file = write_dataset(tmp_path, pixels, labels, prefix="tiny")
    return images, label_file, pixels, labels
