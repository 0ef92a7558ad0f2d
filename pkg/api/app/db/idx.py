"""Reader for the IDX container MNIST and FashionMNIST ship in."""
import gzip
import math
import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from app.core.errors import FormatError, ShapeError
from app.core.files import PathLike
from app.core.tensor import Tensor4

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_LABEL = 9


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: corrupt gzip stream ({e})", 0) from e
    return raw


def parse_idx(buf: bytes, magic: int, ndim: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Validate header fields (big-endian) and return dims plus the uint8 payload."""
    header_size = 4 * (1 + ndim)
    if len(buf) < 4:
        raise FormatError("file too short for an IDX magic number", len(buf))
    found = int(np.frombuffer(buf, dtype=">u4", count=1)[0])
    if found != magic:
        raise FormatError(f"bad magic number 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < header_size:
        raise FormatError(f"truncated header, need {header_size} bytes", len(buf))
    dims = tuple(int(d) for d in np.frombuffer(buf, dtype=">u4", count=ndim, offset=4))
    expected = header_size + math.prod(dims)
    if len(buf) < expected:
        raise FormatError(f"truncated payload, dims {dims} need {expected} bytes", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload", expected)
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header_size)


def read_idx_images(path: PathLike) -> Tensor4:
    """(count, rows, cols, 1) with pixel bytes scaled to [0, 1]."""
    dims, payload = parse_idx(_read_bytes(path), IMAGE_MAGIC, 3)
    images = payload.reshape(dims[0], dims[1], dims[2], 1) / 255.0
    logger.info(f"Loaded {dims[0]} images of {dims[1]}x{dims[2]} from {path}")
    return Tensor4(images)


def read_idx_labels(path: PathLike) -> np.ndarray:
    (count,), payload = parse_idx(_read_bytes(path), LABEL_MAGIC, 1)
    if count == 0:
        raise FormatError("label file holds no labels", 8)
    bad = np.flatnonzero(payload > MAX_LABEL)
    if bad.size:
        raise FormatError(f"label {payload[bad[0]]} outside [0, {MAX_LABEL}]", 8 + int(bad[0]))
    return payload.astype(np.int64)


def read_idx_dataset(images_path: PathLike, labels_path: PathLike) -> Tuple[Tensor4, np.ndarray]:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != labels.size:
        raise ShapeError(f"{labels.size} labels for {len(images)} images")
    return images, labels


def encode_idx(array: np.ndarray, magic: int) -> bytes:
    """Big-endian IDX bytes for a uint8 array."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = np.array([magic, *array.shape], dtype=">u4").tobytes()
    return header + array.tobytes()
