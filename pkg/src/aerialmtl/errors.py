"""Exception hierarchy.

Every error carries a small integer ``code`` so the command line can map a
failure category to a process exit status.
"""


class MtlError(Exception):
    code = 1


class InvalidArgument(MtlError, ValueError):
    code = 2


class ShapeError(MtlError, ValueError):
    code = 3


class ConfigError(MtlError, ValueError):
    code = 4


class DegenerateLossError(MtlError, ArithmeticError):
    """Raised when a loss has no contributing pixels."""
    code = 5


class TrainingDiverged(MtlError, ArithmeticError):
    code = 6


class FormatError(MtlError, ValueError):
    """Malformed or truncated raster file."""

    code = 7

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CorruptCheckpoint(MtlError, ValueError):
    code = 8


class EmptyEvaluation(MtlError, ValueError):
    code = 9


class DataError(MtlError, ValueError):
    code = 10
