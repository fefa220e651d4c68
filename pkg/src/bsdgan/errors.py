"""Exception types shared across the package."""


class BsdganError(Exception):
    """Base class for all package errors."""


class IngestionError(BsdganError):
    """Raw sensor data could not be read or parsed."""


class FormatError(IngestionError):
    """A parsed record violates the expected layout."""


class DescriptorError(BsdganError):
    """An architecture descriptor cannot be realized for the given shape."""


class CheckpointError(BsdganError):
    """A checkpoint file is missing, corrupt, or shape-incompatible."""


class PriorError(BsdganError):
    """The per-class latent prior cannot be fitted or loaded."""


class PenaltyError(BsdganError):
    """The gradient penalty produced a non-finite gradient."""


class TrainingDiverged(BsdganError):
    """Training produced a non-finite loss; the last good state is attached."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(BsdganError):
    """The pipeline configuration is invalid."""


class MissingArtifactError(BsdganError):
    """A required upstream artifact is absent or hash-mismatched."""
