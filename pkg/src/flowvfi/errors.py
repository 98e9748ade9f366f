"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(ValueError):
    """A hyperparameter or layer configuration is invalid."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the current model."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""
