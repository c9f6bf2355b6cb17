"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numeric failures with 3 and I/O failures with 4.
"""


class ConfigurationError(ValueError):
    """Invalid configuration, argument or shape."""


class ShapeMismatchError(ConfigurationError):
    """Array shapes are inconsistent with each other or with the config."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class DatasetIOError(OSError):
    """Reading or writing dataset / artifact files failed."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts are left in place."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
