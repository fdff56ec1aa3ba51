"""Error taxonomy shared by the library and the command line.

Each error carries the process exit code the CLI reports for it.
"""


class SafeOccError(Exception):
    """Base class for all expected failures"""
    exit_code = 1


class MissingArtifactError(SafeOccError):
    """A referenced file or directory does not exist"""
    exit_code = 2


class ValidationError(SafeOccError, ValueError):
    """Inputs, flags or manifests fail validation"""
    exit_code = 3


class ShapeError(ValidationError):
    """Array dimensions do not line up"""


class NumericalAbort(SafeOccError):
    """Training diverged, a solver failed to converge, or values went non-finite"""
    exit_code = 4
