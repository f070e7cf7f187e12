"""Exception hierarchy shared across the package."""


class ExitSegError(Exception):
    """Base class for all package errors."""


class ShapeError(ExitSegError, ValueError):
    """An operation received operands with incompatible shapes."""

    def __init__(self, op, message, *, expected=None, got=None):
        self.op = op
        self.expected = expected
        self.got = got
        detail = message
        if expected is not None or got is not None:
            detail = f"{message} (expected {expected}, got {got})"
        super().__init__(f"{op}: {detail}")


class ConfigError(ExitSegError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(ExitSegError, ValueError):
    """Malformed, inconsistent or unusable input data."""


class CheckpointError(ExitSegError):
    """Checkpoint or dataset file is corrupt, truncated or of the wrong version."""


class TrainingError(ExitSegError):
    """Training diverged or could not proceed."""

    def __init__(self, message, *, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class VerificationError(ExitSegError):
    """A verification harness (e.g. gradient check) reported a failure."""
