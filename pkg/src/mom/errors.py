"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Shapes, gates or configuration values that violate a contract."""


class UnsupportedOperation(NotImplementedError):
    """Requested operation is not available for this rule kind."""


class InconsistentFunction(RuntimeError):
    """A function expected to be deterministic returned different values."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
