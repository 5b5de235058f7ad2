"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor arguments disagree in shape."""


class DomainError(ValueError):
    """A scalar argument lies outside its admissible range."""


class ConfigError(ValueError):
    """A configuration value violates an invariant."""


class CheckpointError(RuntimeError):
    """Checkpoint archive cannot be used."""


class IntegrityError(CheckpointError):
    """Archive digest does not match its payload."""


class VersionError(CheckpointError):
    """Archive was written by a newer format version."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted."""
