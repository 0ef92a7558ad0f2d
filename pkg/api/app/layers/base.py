from abc import ABC, abstractmethod
from typing import Tuple

import numpy as np

Dims3 = Tuple[int, int, int]


class Layer(ABC):
    """A DCGMM layer with an estimation-mode and a sampling-mode transform.

    Arrays are N×H×W×C float64; ``input_dims``/``output_dims`` exclude N.
    """

    def __init__(self, index: int, input_dims: Dims3, output_dims: Dims3):
        self.index = index
        self.input_dims = tuple(input_dims)
        self.output_dims = tuple(output_dims)

    @property
    def name(self) -> str:
        return f"{type(self).__name__}[{self.index}]"

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        """Estimation mode."""

    def backward_control(self, control: np.ndarray) -> np.ndarray:
        """Sampling mode: control signal for the layer below.

        GMM layers draw instead; see ``GmmLayer.sample_control``.
        """
        raise NotImplementedError(f"{self.name} has no deterministic sampling transform")

    def backward_gradient(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Chain rule through ``forward`` evaluated at ``x``."""
        raise NotImplementedError(f"{self.name} does not propagate gradients")
