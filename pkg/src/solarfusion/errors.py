"""Exception types raised across the package."""


class SolarFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(SolarFusionError, ValueError):
    pass


class EmptyInputError(SolarFusionError, ValueError):
    pass


class ParseError(SolarFusionError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(ParseError):
    pass


class CoverageError(SolarFusionError, KeyError):
    """A required value (fitted cell, grid corner, simulator value) is absent."""

    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)

    def __str__(self):
        return self.args[0]


class InsufficientDataError(SolarFusionError, ValueError):
    pass


class ConditioningError(SolarFusionError, ArithmeticError):
    pass


class SingularDesignError(SolarFusionError, ArithmeticError):
    pass


class FitError(SolarFusionError, RuntimeError):
    """Every optimizer start failed; ``diagnostics`` holds one entry per start."""

    def __init__(self, message, diagnostics=()):
        self.diagnostics = list(diagnostics)
        super().__init__(message)


class InfeasibleDesignError(SolarFusionError, ValueError):
    pass


class OutOfCellError(SolarFusionError, ValueError):
    pass


class InfeasibleComparatorError(SolarFusionError, ValueError):
    pass


class IncompleteYearError(SolarFusionError, ValueError):
    pass
