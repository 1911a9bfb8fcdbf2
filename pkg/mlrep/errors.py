"""
mlrep Errors
============

Exception hierarchy. Every error carries the process exit code the CLI
returns for it:

    0  success
    1  usage error (API misuse)
    2  configuration error
    3  data error (shapes, formats, checksums, incompatible inputs)
    4  numeric error (non-finite values, failed gradient checks)
    5  storage error (unreadable or unwritable paths)
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class MlrepError(Exception):
    """Base class for all pipeline errors"""
    exit_code = EXIT_USAGE


class UsageError(MlrepError):
    """Operation called out of order (missing cache, stale map, uninitialized stats)"""
    exit_code = EXIT_USAGE


class ConfigError(MlrepError):
    exit_code = EXIT_CONFIG


# ==============================================================================
# DATA ERRORS
# ==============================================================================

class DataError(MlrepError):
    exit_code = EXIT_DATA


class ShapeError(DataError):
    pass


class AlignmentError(DataError):
    pass


class DatasetFormatError(DataError):
    """Malformed manifest or blob"""


class ChecksumError(DatasetFormatError):
    pass


class TruncatedDataError(DatasetFormatError):
    pass


class WidthMismatchError(DatasetFormatError):
    pass


class WeightsFormatError(DatasetFormatError):
    """Bad magic or unsupported version in a weights container"""


class TensorCountError(DatasetFormatError):
    pass


class IncompatibleModelError(DataError):
    """Dataset widths do not match the widths a model was built for"""


class SingleClassError(DataError):
    """Binary task whose labels contain only one class"""

    def __init__(self, task: str, message: str = ""):
        self.task = task
        super().__init__(message or f"Task '{task}' has a single class in its labels")


class EvaluationError(DataError):
    pass


class ReportFormatError(DataError):
    """Result table whose columns or values break its table definition"""


# ==============================================================================
# NUMERIC ERRORS
# ==============================================================================

class NumericError(MlrepError):
    exit_code = EXIT_NUMERIC


class NonFiniteError(NumericError):
    pass


class GradcheckFailure(NumericError):
    pass


class StorageError(MlrepError):
    exit_code = EXIT_IO


class DatasetNotFoundError(DataError):
    pass
