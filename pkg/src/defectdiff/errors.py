"""Exception types shared across training modules."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


class WeightsUnavailableError(RuntimeError):
    """Raised when pretrained backbone weights cannot be loaded; names the cache path."""
