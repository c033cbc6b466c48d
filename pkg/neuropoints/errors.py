EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class NeuroPointsError(Exception):
    exit_code = EXIT_DATA


class DimensionError(NeuroPointsError, ValueError):
    exit_code = EXIT_USAGE


class ParameterError(NeuroPointsError, ValueError):
    exit_code = EXIT_USAGE


class DataError(NeuroPointsError, ValueError):
    exit_code = EXIT_DATA


class UnsupportedTaskError(NeuroPointsError, ValueError):
    exit_code = EXIT_DATA


class NumericError(NeuroPointsError, ArithmeticError):
    exit_code = EXIT_NUMERIC


def shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) or "scalar"
