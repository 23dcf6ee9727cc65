"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data/format
problems exit 3, numerical failures exit 4.
"""


class PfdError(Exception):
    exit_code = 1


class UsageError(PfdError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class ShapeError(PfdError, ValueError):
    exit_code = 3


class DomainError(PfdError, ValueError):
    exit_code = 3


class DataError(PfdError):
    exit_code = 3


class FormatError(DataError):
    pass


class LengthError(FormatError):
    pass


class GenerationError(DataError):
    pass


class InvalidStateError(PfdError):
    exit_code = 3


class NumericalError(PfdError):
    exit_code = 4
