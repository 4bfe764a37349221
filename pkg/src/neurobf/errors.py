"""Exception types shared across the package.

Two families matter to callers: configuration problems (bad shapes, bad
parameters, inconsistent settings) and data problems (missing or corrupt
artifacts, datasets too small for the requested operation). The CLI maps
them to exit codes 2 and 3 respectively.
"""


class NeurobfError(Exception):
    pass


class ConfigError(NeurobfError, ValueError):
    pass


class DimensionError(ConfigError):
    pass


class DomainError(NeurobfError, ValueError):
    pass


class DegenerateBatchError(DomainError):
    pass


class NumericError(NeurobfError, ArithmeticError):
    pass


class SizeError(DomainError):
    pass


class DataError(NeurobfError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(NeurobfError, RuntimeError):
    pass
