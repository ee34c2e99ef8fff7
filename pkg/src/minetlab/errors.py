"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NonFiniteLossError / ToleranceError -> 3.
"""


class MinetLabError(Exception):
    pass


class ConfigError(MinetLabError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class ShapeError(MinetLabError, ValueError):
    """Tensor shape violates a contract; the message names the offending axis."""


class DataError(MinetLabError):
    """Dataset-level failure: missing counterparts, unreadable files, empty match."""


class CheckpointError(MinetLabError):
    """Unreadable checkpoint or config mismatch; message lists differing fields."""


class NonFiniteLossError(MinetLabError, RuntimeError):
    """Training aborted on a non-finite loss; carries the iteration diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ToleranceError(MinetLabError):
    """A numeric check exceeded its tolerance (gradient check and friends)."""
