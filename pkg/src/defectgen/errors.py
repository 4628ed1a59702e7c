"""Exception hierarchy used across the package.

Everything derives from :class:`DefectgenError` so callers (and the CLI)
can catch package failures without swallowing unrelated bugs.
"""


class DefectgenError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectgenError, ValueError):
    """An argument value is outside its allowed range."""


class ShapeError(DefectgenError, ValueError):
    """Array shapes do not agree with the operation's contract."""


class ConfigError(DefectgenError):
    """A configuration file or override could not be parsed."""


class DataError(DefectgenError):
    """A dataset directory is malformed (missing mask, bad dims, ...)."""


class CheckpointError(DefectgenError):
    """A model checkpoint file is missing or corrupt."""


class DivergenceError(DefectgenError):
    """Training produced a non-finite loss."""


class AlignmentError(DefectgenError):
    """Mask alignment failed; ``stage`` names the step that failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
