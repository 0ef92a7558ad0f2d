"""Dense N×H×W×C tensor used as the currency between layers.

Storage is a C-contiguous float64 numpy array, so the flat layout is
row-major with channels fastest, then width, height and batch.
"""
from typing import Sequence, Tuple

import numpy as np

from app.core.errors import ShapeError

Dims = Tuple[int, int, int, int]


class Tensor4:
    """Activities or control signals of one layer for a mini-batch."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        array = np.ascontiguousarray(data, dtype=np.float64)
        if array.ndim != 4:
            raise ShapeError(f"expected a 4D array, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("tensor contains non-finite values")
        self.data = array

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims})"

    def flat_index(self, n: int, h: int, w: int, c: int) -> int:
        _, H, W, C = self.dims
        return ((n * H + h) * W + w) * C + c

    def slice_channel_vector(self, n: int, h: int, w: int) -> np.ndarray:
        """Return the C contiguous values stored at position (n, h, w)."""
        N, H, W, _ = self.dims
        assert 0 <= n < N and 0 <= h < H and 0 <= w < W, f"index ({n},{h},{w}) outside {self.dims}"
        return self.data[n, h, w, :].copy()

    def write_channel_vector(self, n: int, h: int, w: int, values: Sequence[float]) -> None:
        # only valid while the tensor is still owned by its builder
        N, H, W, C = self.dims
        assert 0 <= n < N and 0 <= h < H and 0 <= w < W, f"index ({n},{h},{w}) outside {self.dims}"
        vector = np.asarray(values, dtype=np.float64)
        if vector.shape != (C,):
            raise ShapeError(f"channel vector of length {vector.shape} does not fit C={C}")
        if not np.all(np.isfinite(vector)):
            raise ValueError("channel vector contains non-finite values")
        self.data[n, h, w, :] = vector

    def reduce_mean_over_positions(self) -> np.ndarray:
        """Mean over the h, w axes for every (n, c) pair, flattened n-major."""
        N, H, W, C = self.dims
        if H * W == 0:
            raise ShapeError("cannot average over an empty spatial extent")
        return self.data.mean(axis=(1, 2)).reshape(N * C)

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy())


def new_filled(dims: Sequence[int], value: float) -> Tensor4:
    """Tensor of the given dims with every element equal to ``value``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 0 for d in dims):
        raise ShapeError(f"invalid dims {dims}")
    try:
        return Tensor4(np.full(dims, value, dtype=np.float64))
    except MemoryError as e:
        raise MemoryError(f"cannot allocate tensor of dims {dims}") from e


def as_tensor(images: np.ndarray) -> Tensor4:
    """Accept N×H×W or N×H×W×C arrays."""
    array = np.asarray(images, dtype=np.float64)
    if array.ndim == 3:
        array = array[..., np.newaxis]
    return Tensor4(array)
