"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class StkdError(Exception):
    exit_code = 1


class ConfigError(StkdError, ValueError):
    exit_code = 1


class ShapeError(StkdError, ValueError):
    exit_code = 1


class MissingParameterError(StkdError, KeyError):
    exit_code = 1

    def __str__(self):
        return Exception.__str__(self)


class DataError(StkdError):
    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericalError(StkdError, ArithmeticError):
    exit_code = 3
