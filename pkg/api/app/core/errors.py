from typing import Optional


class DcgmmError(Exception):
    """Base class for every error raised by the DCGMM services."""


class ConfigurationError(DcgmmError):
    """Invalid architecture, run configuration or layer geometry."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class ShapeError(DcgmmError):
    """Tensor dimensions do not match what an operation expects."""


class InvalidControlError(DcgmmError):
    """A selector row cannot be turned into a component distribution."""


class InvalidLabelError(DcgmmError):
    """Class labels out of range or rows that are not one-hot."""


class DivergenceError(DcgmmError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, layer_index: int):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class SharpeningDivergenceError(DcgmmError):
    """Sharpening met a non-finite gradient."""


class FormatError(DcgmmError):
    """A binary file could not be parsed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class IntegrityError(DcgmmError):
    """Checkpoint checksum or version mismatch."""


class EmptyDatasetError(DcgmmError):
    """An operation needs at least one sample."""


class DegenerateClusterError(DcgmmError):
    """Cluster geometry makes a validity index undefined."""
