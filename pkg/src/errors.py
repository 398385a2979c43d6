"""
Exception types shared across the pipeline.

Every error carries the exit code the command line reports for it, so a
failure deep inside training or extraction surfaces as one parsable line.
"""


class DitError(Exception):
    """Base class for all pipeline errors."""

    exit_code: int = 1


class DataFileError(DitError):
    """A referenced data file is missing, unreadable or malformed."""

    exit_code = 3

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{reason} (path={self.path})")


class ConfigError(DitError, ValueError):
    exit_code = 4


class CheckpointError(DitError):
    """Bad checkpoint magic/version or a model/checkpoint mismatch."""

    exit_code = 5


class InvalidSpecError(DitError, ValueError):
    exit_code = 6


class EmptyMeshError(DitError):
    """The field has no zero crossing inside the extraction bounds."""

    exit_code = 7


class NonFiniteLossError(DitError, FloatingPointError):
    """Training produced a NaN/inf loss; `dump_path` points at the diagnostic dump."""

    exit_code = 8

    def __init__(self, iteration: int, dump_path: str = ""):
        self.iteration = iteration
        self.dump_path = dump_path
        super().__init__(f"non-finite loss at iteration {iteration} (dump={dump_path or 'none'})")
