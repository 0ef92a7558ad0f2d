from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator

from app.core.errors import ConfigurationError

Dims3 = Tuple[int, int, int]


class FoldingParams(BaseModel):
    """F(f_y, f_x, delta_y, delta_x): sliding window dumped into channels."""
    kind: Literal["folding"] = "folding"
    f_y: int = Field(ge=1)
    f_x: int = Field(ge=1)
    delta_y: int = Field(ge=1)
    delta_x: int = Field(ge=1)

    def notation(self) -> str:
        return f"F({self.f_y},{self.f_x},{self.delta_y},{self.delta_x})"


class PoolingParams(BaseModel):
    """P(k_y, k_x, delta_y, delta_x): max-pooling, kernel must equal stride."""
    kind: Literal["pooling"] = "pooling"
    k_y: int = Field(ge=1)
    k_x: int = Field(ge=1)
    delta_y: int = Field(ge=1)
    delta_x: int = Field(ge=1)

    @model_validator(mode="after")
    def kernel_equals_stride(self):
        if self.k_y != self.delta_y or self.k_x != self.delta_x:
            raise ValueError(
                f"pooling kernel ({self.k_y},{self.k_x}) must equal stride ({self.delta_y},{self.delta_x})"
            )
        return self

    def notation(self) -> str:
        if self.k_y == self.k_x and self.delta_y == self.delta_x:
            return f"P({self.k_y},{self.delta_y})"
        return f"P({self.k_y},{self.k_x},{self.delta_y},{self.delta_x})"


class GmmSpec(BaseModel):
    """G(K)."""
    kind: Literal["gmm"] = "gmm"
    K: int = Field(ge=1)

    def notation(self) -> str:
        return f"G({self.K})"


class ClassifierSpec(BaseModel):
    """C(M): linear classifier on the flattened activities below."""
    kind: Literal["classifier"] = "classifier"
    M: int = Field(ge=2)

    def notation(self) -> str:
        return f"C({self.M})"


LayerSpec = Annotated[
    Union[FoldingParams, PoolingParams, GmmSpec, ClassifierSpec],
    Field(discriminator="kind"),
]


def window_output(extent: int, size: int, stride: int, axis: str, index: Optional[int] = None) -> int:
    if extent < size or (extent - size) % stride != 0:
        raise ConfigurationError(
            f"{axis} extent {extent} incompatible with window {size} and stride {stride}",
            layer_index=index,
        )
    return 1 + (extent - size) // stride


def propagate_shapes(layers: List[LayerSpec], input_dims: Dims3) -> List[Dims3]:
    """Per-layer output dims (H, W, C); entry 0 is the input itself.

    Raises ConfigurationError naming the first offending layer.
    """
    h, w, c = (int(d) for d in input_dims)
    if min(h, w, c) < 1:
        raise ConfigurationError(f"input dims must be positive, got {input_dims}")
    dims: List[Dims3] = [(h, w, c)]
    for index, layer in enumerate(layers):
        if isinstance(layer, FoldingParams):
            h, w, c = (
                window_output(h, layer.f_y, layer.delta_y, "height", index),
                window_output(w, layer.f_x, layer.delta_x, "width", index),
                c * layer.f_y * layer.f_x,
            )
        elif isinstance(layer, PoolingParams):
            h, w = (
                window_output(h, layer.k_y, layer.delta_y, "height", index),
                window_output(w, layer.k_x, layer.delta_x, "width", index),
            )
        elif isinstance(layer, GmmSpec):
            c = layer.K
        elif isinstance(layer, ClassifierSpec):
            if index != len(layers) - 1:
                raise ConfigurationError("a classifier may only be the last layer", layer_index=index)
            h, w, c = 1, 1, layer.M
        dims.append((h, w, c))
    return dims


class ArchitectureConfig(BaseModel):
    """Ordered layer descriptors plus input dims, validated eagerly."""
    input_dims: Dims3 = (28, 28, 1)
    layers: List[LayerSpec]
    name: str = ""

    @model_validator(mode="after")
    def validate_stack(self):
        if not self.layers:
            raise ConfigurationError("an architecture needs at least one layer")
        classifiers = [i for i, l in enumerate(self.layers) if isinstance(l, ClassifierSpec)]
        if len(classifiers) > 1:
            raise ConfigurationError("at most one classifier layer is allowed", layer_index=classifiers[1])
        if not any(isinstance(l, GmmSpec) for l in self.layers):
            raise ConfigurationError("an architecture needs at least one GMM layer")
        propagate_shapes(self.layers, self.input_dims)
        return self

    def shapes(self) -> List[Dims3]:
        return propagate_shapes(self.layers, self.input_dims)

    def notation(self) -> str:
        h, w, c = self.input_dims
        return " / ".join([f"input {h} {w} {c}"] + [layer.notation() for layer in self.layers])


# Reference architectures by ID. The printed 3L-a row ends in F(6,6,1,1), which
# meets a 5×5 input; the valid reading folds the remaining 5×5 window instead.
REFERENCE_ARCHITECTURES = {
    "1L": "F(28,28,1,1) / G(25)",
    "2L-a": "F(20,20,8,8) / G(25) / F(2,2,1,1) / G(36)",
    "2L-b": "F(7,7,7,7) / G(25) / F(4,4,1,1) / G(36)",
    "2L-c": "F(8,8,2,2) / G(25) / F(11,11,1,1) / G(36)",
    "2L-d": "F(28,28,1,1) / G(25) / F(1,1,1,1) / G(36)",
    "2L-e": "F(4,4,2,2) / G(25) / F(13,13,1,1) / G(36)",
    "3L-a": "F(3,3,1,1) / G(25) / P(2,2) / F(4,4,1,1) / G(25) / P(2,2) / F(5,5,1,1) / G(49)",
    "3L-b": "F(28,28,1,1) / G(25) / F(1,1,1,1) / G(25) / F(1,1,1,1) / G(25)",
}

PRINTED_3LA = "F(3,3,1,1) / G(25) / P(2,2) / F(4,4,1,1) / G(25) / P(2,2) / F(6,6,1,1) / G(49)"
