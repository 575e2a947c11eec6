"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config errors exit 1, data and
parse errors exit 2, numeric and verification failures exit 3.
"""


class GraphparseError(Exception):
    exit_code = 1


class UsageError(GraphparseError):
    exit_code = 1


class ConfigError(GraphparseError):
    exit_code = 1


class DimensionError(GraphparseError, ValueError):
    exit_code = 1


class DataError(GraphparseError, ValueError):
    exit_code = 2


class ParseError(DataError):
    exit_code = 2


class TaxonomyError(DataError):
    exit_code = 2


class NumericError(GraphparseError, ArithmeticError):
    exit_code = 3


class CheckpointError(DataError):
    exit_code = 2


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeConflictError(CheckpointError):
    pass
