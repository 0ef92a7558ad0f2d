"""Sample grids as 8-bit grayscale PGM (P5), with an optional PNG companion."""
import io
import logging
import math

import numpy as np
from matplotlib import image as mpimg

from app.core.errors import FormatError, ShapeError
from app.core.files import PathLike, atomic_write_bytes
from app.core.tensor import Tensor4

logger = logging.getLogger(__name__)

SEPARATOR = 128


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale to [0, 255] rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_grid(samples: Tensor4, columns: int) -> np.ndarray:
    n, h, w, c = samples.dims
    if c != 1:
        raise ShapeError(f"image grids need one channel, got {c}")
    if columns < 1 or n < 1:
        raise ShapeError(f"cannot lay out {n} samples in {columns} columns")
    rows = math.ceil(n / columns)
    grid = np.full((rows * h + rows - 1, columns * w + columns - 1), SEPARATOR, dtype=np.uint8)
    pixels = to_bytes(samples.data[..., 0])
    for i in range(rows * columns):
        r, col = divmod(i, columns)
        cell = pixels[i] if i < n else 0
        grid[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = cell
    return grid


def encode_pgm(samples: Tensor4, columns: int) -> bytes:
    grid = render_grid(samples, columns)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    return header + grid.tobytes()


def encode_png(samples: Tensor4, columns: int) -> bytes:
    buffer = io.BytesIO()
    mpimg.imsave(buffer, render_grid(samples, columns), cmap="gray", vmin=0, vmax=255, format="png")
    return buffer.getvalue()


def write_image_grid(samples: Tensor4, columns: int, path: PathLike) -> None:
    atomic_write_bytes(path, encode_pgm(samples, columns))
    logger.info(f"Wrote {len(samples)} samples as a grid to {path}")


def write_image_png(samples: Tensor4, columns: int, path: PathLike) -> None:
    atomic_write_bytes(path, encode_png(samples, columns))


def read_pgm(path: PathLike) -> np.ndarray:
    """Parse a binary PGM written by ``write_image_grid``."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM file", 0)
    width, height = (int(v) for v in parts[1].split())
    offset = sum(len(p) + 1 for p in parts[:3])
    body = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    if body.size != width * height:
        raise FormatError(f"expected {width * height} pixels, found {body.size}", offset)
    return body.reshape(height, width)
