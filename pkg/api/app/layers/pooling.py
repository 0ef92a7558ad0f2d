"""Max-pooling with kernel = stride; sampling mode is nearest-neighbour up-sampling."""
from typing import Sequence

import numpy as np

from app.core.errors import ShapeError
from app.core.tensor import Tensor4
from app.layers.base import Layer
from app.models.architecture import PoolingParams, window_output


def pooled_dims(input_dims: Sequence[int], p: PoolingParams, index=None):
    h, w, c = input_dims
    return (
        window_output(h, p.k_y, p.delta_y, "height", index),
        window_output(w, p.k_x, p.delta_x, "width", index),
        c,
    )


def _windows(x: np.ndarray, p: PoolingParams) -> np.ndarray:
    # (N, Ho, Wo, C, ky*kx)
    n, h, w, c = x.shape
    ho, wo, _ = pooled_dims((h, w, c), p)
    blocks = x.reshape(n, ho, p.k_y, wo, p.k_x, c)
    return blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, p.k_y * p.k_x)


def pool_array(x: np.ndarray, p: PoolingParams) -> np.ndarray:
    return _windows(x, p).max(axis=-1)


def upsample_array(control: np.ndarray, p: PoolingParams, input_dims: Sequence[int]) -> np.ndarray:
    expected = pooled_dims(input_dims, p)
    if tuple(control.shape[1:]) != expected:
        raise ShapeError(f"control dims {control.shape[1:]} do not match pooled dims {expected}")
    return np.repeat(np.repeat(control, p.k_y, axis=1), p.k_x, axis=2)


def pool_gradient_array(grad_out: np.ndarray, x: np.ndarray, p: PoolingParams) -> np.ndarray:
    """Route each window's gradient to its (first) argmax."""
    n, h, w, c = x.shape
    ho, wo, _ = pooled_dims((h, w, c), p)
    windows = _windows(x, p)
    winners = np.argmax(windows, axis=-1)
    routed = np.zeros_like(windows)
    np.put_along_axis(routed, winners[..., np.newaxis], grad_out[..., np.newaxis], axis=-1)
    routed = routed.reshape(n, ho, wo, c, p.k_y, p.k_x).transpose(0, 1, 4, 2, 5, 3)
    return routed.reshape(n, h, w, c)


def pool_forward(input: Tensor4, p: PoolingParams) -> Tensor4:
    return Tensor4(pool_array(input.data, p))


def pool_backward_control(control: Tensor4, p: PoolingParams, input_dims: Sequence[int]) -> Tensor4:
    dims = tuple(input_dims)[-3:]
    if len(tuple(input_dims)) == 4 and input_dims[0] != control.dims[0]:
        raise ShapeError(f"batch count {control.dims[0]} does not match {input_dims[0]}")
    return Tensor4(upsample_array(control.data, p, dims))


class PoolingLayer(Layer):

    def __init__(self, index: int, input_dims, params: PoolingParams):
        super().__init__(index, input_dims, pooled_dims(input_dims, params, index))
        self.params = params

    def forward(self, x: np.ndarray) -> np.ndarray:
        return pool_array(x, self.params)

    def backward_control(self, control: np.ndarray) -> np.ndarray:
        return upsample_array(control, self.params, self.input_dims)

    def backward_gradient(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
        return pool_gradient_array(grad_out, x, self.params)
