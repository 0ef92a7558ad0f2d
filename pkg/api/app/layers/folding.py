"""Folding: every sliding window is dumped into the channel dimension.

Output channel c = ((dy * f_x) + dx) * C_in + c', i.e. the window is
enumerated row-major with input channels fastest.
"""
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.errors import ShapeError
from app.core.tensor import Tensor4
from app.layers.base import Layer
from app.models.architecture import FoldingParams, window_output


def folded_dims(input_dims: Sequence[int], p: FoldingParams, index=None):
    h, w, c = input_dims
    return (
        window_output(h, p.f_y, p.delta_y, "height", index),
        window_output(w, p.f_x, p.delta_x, "width", index),
        c * p.f_y * p.f_x,
    )


def fold_array(x: np.ndarray, p: FoldingParams) -> np.ndarray:
    n = x.shape[0]
    ho, wo, co = folded_dims(x.shape[1:], p)
    # (N, H-fy+1, W-fx+1, C, fy, fx)
    windows = sliding_window_view(x, (p.f_y, p.f_x), axis=(1, 2))
    windows = windows[:, :: p.delta_y, :: p.delta_x]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, co)


def unfold_array(control: np.ndarray, p: FoldingParams, input_dims: Sequence[int], average: bool) -> np.ndarray:
    """Scatter windows back onto the input grid.

    ``average=True`` is the sampling-mode inverse; ``average=False`` is the
    adjoint of ``fold_array`` used for gradients.
    """
    h, w, c = (int(d) for d in input_dims)
    expected = folded_dims((h, w, c), p)
    if tuple(control.shape[1:]) != expected:
        raise ShapeError(f"control dims {control.shape[1:]} do not match folded dims {expected}")
    n, ho, wo, _ = control.shape
    blocks = control.reshape(n, ho, wo, p.f_y, p.f_x, c)
    out = np.zeros((n, h, w, c), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.float64)
    for iy in range(p.f_y):
        rows = slice(iy, iy + p.delta_y * (ho - 1) + 1, p.delta_y)
        for ix in range(p.f_x):
            cols = slice(ix, ix + p.delta_x * (wo - 1) + 1, p.delta_x)
            out[:, rows, cols, :] += blocks[:, :, :, iy, ix, :]
            counts[rows, cols] += 1.0
    if average:
        out /= np.maximum(counts, 1.0)[np.newaxis, :, :, np.newaxis]
    return out


def fold_forward(input: Tensor4, p: FoldingParams) -> Tensor4:
    return Tensor4(fold_array(input.data, p))


def fold_backward_control(control: Tensor4, p: FoldingParams, input_dims: Sequence[int]) -> Tensor4:
    """Average of all control entries each input element was copied to.

    ``input_dims`` may be given with or without the batch count.
    """
    dims = tuple(input_dims)[-3:]
    if len(tuple(input_dims)) == 4 and input_dims[0] != control.dims[0]:
        raise ShapeError(f"batch count {control.dims[0]} does not match {input_dims[0]}")
    return Tensor4(unfold_array(control.data, p, dims, average=True))


class FoldingLayer(Layer):

    def __init__(self, index: int, input_dims, params: FoldingParams):
        super().__init__(index, input_dims, folded_dims(input_dims, params, index))
        self.params = params

    def forward(self, x: np.ndarray) -> np.ndarray:
        return fold_array(x, self.params)

    def backward_control(self, control: np.ndarray) -> np.ndarray:
        return unfold_array(control, self.params, self.input_dims, average=True)

    def backward_gradient(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
        return unfold_array(grad_out, self.params, self.input_dims, average=False)
