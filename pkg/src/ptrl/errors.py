"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, shape, mode string or layer index."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class InputError(ValueError):
    """Non-finite or otherwise unusable input data."""


class CorruptCheckpointError(Exception):
    """Checkpoint bytes are unreadable (bad magic, truncation, trailing data)."""


class CheckpointVersionError(CorruptCheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class InvalidCheckpointError(Exception):
    """Checkpoint parsed but its layer shapes do not chain."""


class IncompatibleTransferError(Exception):
    """Source and target networks do not share hidden widths."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
