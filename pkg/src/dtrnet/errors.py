"""Exception hierarchy shared across the package."""


class DTRNetError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ConfigError(DTRNetError, ValueError):
    """Invalid configuration value or structure (CLI exit code 2)."""


class DimensionError(DTRNetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DTRNetError, RuntimeError):
    """An operation was called outside its preconditions."""


class UnsupportedModeError(DTRNetError, RuntimeError):
    """Requested behaviour is not available for the configured routing mode."""


class SequenceLengthError(DTRNetError, ValueError):
    """Sequence exceeds the model's maximum length."""


class CheckpointError(DTRNetError, OSError):
    """Checkpoint is unreadable, corrupt, or from an incompatible format version."""


class NonFiniteLossError(DTRNetError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot
