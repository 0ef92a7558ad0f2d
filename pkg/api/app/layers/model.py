"""A DCGMM instance: the layer stack built from an ArchitectureConfig."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from app.core.errors import ConfigurationError, ShapeError
from app.layers.base import Layer
from app.layers.classifier import ClassifierLayer, ClassifierParams
from app.layers.folding import FoldingLayer
from app.layers.gmm import GmmLayer, GmmParams
from app.layers.pooling import PoolingLayer
from app.models.architecture import (
    ArchitectureConfig,
    ClassifierSpec,
    FoldingParams,
    GmmSpec,
    PoolingParams,
)

logger = logging.getLogger(__name__)


@dataclass
class ForwardPass:
    """Estimation-mode results; ``outputs[i]`` is the output of layer i."""
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    logliks: Dict[int, np.ndarray] = field(default_factory=dict)
    logits: Optional[np.ndarray] = None

    def activities(self, number: int) -> np.ndarray:
        """A^(number) with 1-based layer numbers; 0 is the input itself."""
        return self.inputs[0] if number == 0 else self.outputs[number - 1]


class DcgmmModel:

    def __init__(self, arch: ArchitectureConfig, layers: List[Layer]):
        self.arch = arch
        self.layers = layers
        self.rng_state: Optional[Dict[str, Any]] = None
        self.training_echo: Dict[str, Any] = {}

    @classmethod
    def build(cls, arch: ArchitectureConfig) -> "DcgmmModel":
        """Layers with their geometry but without parameters."""
        shapes = arch.shapes()
        layers: List[Layer] = []
        for index, spec in enumerate(arch.layers):
            dims = shapes[index]
            if isinstance(spec, FoldingParams):
                layers.append(FoldingLayer(index, dims, spec))
            elif isinstance(spec, PoolingParams):
                layers.append(PoolingLayer(index, dims, spec))
            elif isinstance(spec, GmmSpec):
                layers.append(GmmLayer(index, dims, spec.K))
            elif isinstance(spec, ClassifierSpec):
                layers.append(ClassifierLayer(index, dims, spec.M))
        return cls(arch, layers)

    @property
    def input_dims(self):
        return tuple(self.arch.input_dims)

    @property
    def gmm_indices(self) -> List[int]:
        return [l.index for l in self.layers if isinstance(l, GmmLayer)]

    @property
    def gmm_layers(self) -> List[GmmLayer]:
        return [l for l in self.layers if isinstance(l, GmmLayer)]

    @property
    def classifier(self) -> Optional[ClassifierLayer]:
        last = self.layers[-1]
        return last if isinstance(last, ClassifierLayer) else None

    @property
    def generative_layers(self) -> List[Layer]:
        """Every layer below the classifier."""
        return self.layers[:-1] if self.classifier is not None else list(self.layers)

    @property
    def top_gmm_index(self) -> int:
        """Index of the topmost non-classifier layer, which must be a GMM layer."""
        top = self.generative_layers[-1]
        if not isinstance(top, GmmLayer):
            raise ConfigurationError(
                "the topmost non-classifier layer must be a GMM layer", layer_index=top.index
            )
        return top.index

    @property
    def top_gmm(self) -> GmmLayer:
        return self.layers[self.top_gmm_index]

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_dims:
            raise ShapeError(f"input dims {x.shape[1:]} do not match architecture input {self.input_dims}")

    def forward(self, x: np.ndarray, upto: Optional[int] = None) -> ForwardPass:
        """Bottom-up pass through layers 0..upto (all layers by default)."""
        self.check_input(x)
        last = len(self.layers) - 1 if upto is None else upto
        result = ForwardPass(inputs=[], outputs=[])
        current = x
        for layer in self.layers[: last + 1]:
            result.inputs.append(current)
            if isinstance(layer, GmmLayer):
                current, result.logliks[layer.index] = layer.forward_with_loglik(current)
            elif isinstance(layer, ClassifierLayer):
                result.logits = layer.logits(current)
                current = result.logits.reshape(current.shape[0], 1, 1, layer.M)
            else:
                current = layer.forward(current)
            result.outputs.append(current)
        return result

    def describe(self) -> str:
        lines = [f"input {self.input_dims}"]
        for layer, spec in zip(self.layers, self.arch.layers):
            lines.append(f"  [{layer.index}] {spec.notation():<16} -> {layer.output_dims}")
        return "\n".join(lines)


def init_model(arch: ArchitectureConfig, seed: int) -> DcgmmModel:
    """Fresh parameters: uniform weights, small random centroids, unit precisions."""
    model = DcgmmModel.build(arch)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if isinstance(layer, GmmLayer):
            layer.params = GmmParams.initial(layer.K, layer.D, rng)
        elif isinstance(layer, ClassifierLayer):
            layer.params = ClassifierParams.initial(layer.D, layer.M, rng)
    model.rng_state = rng.bit_generator.state
    logger.info(f"Initialised {arch.name or 'model'} with seed {seed}: {len(model.layers)} layers")
    return model
