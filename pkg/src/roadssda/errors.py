"""Exception types shared across the package."""


class RoadSSDAError(Exception):
    """Base class for all package errors."""


class ManifestError(RoadSSDAError, ValueError):
    """A manifest or config file is malformed or violates an invariant."""


class IngestionError(RoadSSDAError, FileNotFoundError):
    """Files referenced by a manifest could not be found or read."""

    def __init__(self, message, paths=()):
        self.paths = [str(p) for p in paths]
        if self.paths:
            message = message + ": " + ", ".join(self.paths)
        super().__init__(message)


class UnsupportedOperationError(RoadSSDAError, ValueError):
    pass


class ShapeError(RoadSSDAError, ValueError):
    pass


class NumericalError(RoadSSDAError, FloatingPointError):
    pass


class CheckpointError(RoadSSDAError):
    """Checkpoint could not be loaded (missing or corrupt)."""


class CheckpointVersionError(CheckpointError):
    pass


class ConfigurationError(RoadSSDAError, ValueError):
    pass
