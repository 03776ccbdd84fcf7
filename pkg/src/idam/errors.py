class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DegenerateConfigurationError(ValueError):
    """Correspondences do not determine a unique rotation."""


class CheckpointError(ValueError):
    """Base class for parameter-file problems."""


class ChecksumError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
