class SelfRecoveryError(Exception):
    """Base class for every error raised by the self-recovery pipeline."""


class ConfigurationError(SelfRecoveryError, ValueError):
    """Invalid parameters, presets, keys or run configuration."""


class ShapeError(SelfRecoveryError, ValueError):
    """Tensor shapes or image resolutions that do not fit together."""


class NumericError(SelfRecoveryError, ArithmeticError):
    """A non-finite value appeared inside an invertible block.

    Attributes:
        block_index: Index of the coupling block that produced the value.
        layer_index: Index of the block inside a multi-block network, if known.
    """

    def __init__(self, message: str, block_index: int | None = None, layer_index: int | None = None):
        self.block_index = block_index
        self.layer_index = layer_index
        location = []
        if layer_index is not None:
            location.append(f"layer {layer_index}")
        if block_index is not None:
            location.append(f"block {block_index}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class CheckpointError(SelfRecoveryError):
    """A checkpoint could not be read or has the wrong format version."""


class TrainingHalted(SelfRecoveryError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, iteration: int | None = None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"Loss component '{component}' is not finite{where}")


class DataError(SelfRecoveryError):
    """Input images are missing, unreadable, or not paired as required."""


class MissingPairsError(DataError):
    """Evaluation found containers without an original, or no originals at all."""


class OutputError(SelfRecoveryError):
    """An output location cannot be created or written."""
