"""Linear read-out on top of the flattened activities of the layer below."""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from app.core.errors import InvalidLabelError, ShapeError
from app.core.tensor import Tensor4
from app.layers.base import Layer


@dataclass
class ClassifierParams:
    weights: np.ndarray  # (D, M)
    bias: np.ndarray     # (M,)

    @property
    def D(self) -> int:
        return self.weights.shape[0]

    @property
    def M(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.weights.copy(), self.bias.copy())

    @classmethod
    def initial(cls, D: int, M: int, rng: np.random.Generator) -> "ClassifierParams":
        return cls(weights=rng.uniform(-0.05, 0.05, size=(D, M)), bias=np.zeros(M))


@dataclass
class ClassifierGrads:
    d_weights: np.ndarray
    d_bias: np.ndarray

    def __add__(self, other: "ClassifierGrads") -> "ClassifierGrads":
        return ClassifierGrads(self.d_weights + other.d_weights, self.d_bias + other.d_bias)


def _flatten(x: np.ndarray, c: ClassifierParams) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != c.D:
        raise ShapeError(f"flattened input length {flat.shape[1]} does not match D={c.D}")
    return flat


def check_labels(labels: np.ndarray, M: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError("labels must be a 1D integer vector")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise InvalidLabelError(f"labels must lie in [0, {M})")
    return labels


def one_hot(labels: Sequence[int], M: int) -> np.ndarray:
    labels = check_labels(np.asarray(labels, dtype=np.int64), M)
    out = np.zeros((labels.size, M))
    out[np.arange(labels.size), labels] = 1.0
    return out


def classifier_forward_array(x: np.ndarray, c: ClassifierParams) -> np.ndarray:
    return _flatten(x, c) @ c.weights + c.bias


def classifier_forward(input: Tensor4, c: ClassifierParams) -> np.ndarray:
    """Logits, one row per sample."""
    return classifier_forward_array(input.data, c)


def classifier_invert_array(onehot: np.ndarray, c: ClassifierParams, input_dims: Sequence[int]) -> np.ndarray:
    onehot = np.asarray(onehot, dtype=np.float64)
    if onehot.ndim != 2 or onehot.shape[1] != c.M:
        raise InvalidLabelError(f"expected an N×{c.M} one-hot matrix, got shape {onehot.shape}")
    valid = np.isin(onehot, (0.0, 1.0)).all(axis=1) & (onehot.sum(axis=1) == 1.0)
    if not valid.all():
        raise InvalidLabelError(f"row {int(np.argmin(valid))} is not a one-hot vector")
    h, w, d = input_dims
    return ((onehot - c.bias) @ c.weights.T).reshape(onehot.shape[0], h, w, d)


def classifier_invert(onehot: np.ndarray, c: ClassifierParams, input_dims: Sequence[int]) -> Tensor4:
    """Approximate inverse of the affine map: (t - b) W^T, shaped like the layer below."""
    return Tensor4(classifier_invert_array(onehot, c, input_dims))


def classifier_loss_and_grad_array(
    x: np.ndarray, labels: np.ndarray, c: ClassifierParams
) -> Tuple[float, ClassifierGrads, np.ndarray]:
    flat = _flatten(x, c)
    labels = check_labels(labels, c.M)
    if labels.size != flat.shape[0]:
        raise InvalidLabelError(f"{labels.size} labels for {flat.shape[0]} samples")
    n = flat.shape[0]
    logits = flat @ c.weights + c.bias
    loss = float(-log_softmax(logits, axis=1)[np.arange(n), labels].mean())
    d_logits = softmax(logits, axis=1)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grads = ClassifierGrads(d_weights=flat.T @ d_logits, d_bias=d_logits.sum(axis=0))
    d_input = (d_logits @ c.weights.T).reshape(x.shape)
    return loss, grads, d_input


def classifier_loss_and_grad(
    input: Tensor4, labels: np.ndarray, c: ClassifierParams
) -> Tuple[float, ClassifierGrads, Tensor4]:
    """Mean softmax cross-entropy and its gradients (descent direction is -grad)."""
    loss, grads, d_input = classifier_loss_and_grad_array(input.data, labels, c)
    return loss, grads, Tensor4(d_input)


class ClassifierLayer(Layer):

    def __init__(self, index: int, input_dims, M: int, params: ClassifierParams = None):
        super().__init__(index, input_dims, (1, 1, M))
        self.M = M
        self.params = params

    @property
    def D(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    def forward(self, x: np.ndarray) -> np.ndarray:
        return classifier_forward_array(x, self.params).reshape(x.shape[0], 1, 1, self.M)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return classifier_forward_array(x, self.params)

    def backward_control(self, control: np.ndarray) -> np.ndarray:
        return classifier_invert_array(control.reshape(control.shape[0], self.M), self.params, self.input_dims)

    def apply_update(self, grads: ClassifierGrads, step: float) -> None:
        self.params.weights -= step * grads.d_weights
        self.params.bias -= step * grads.d_bias
