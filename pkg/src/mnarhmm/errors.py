"""Exception hierarchy shared by all modules."""


class MnarHmmError(Exception):
    """Base class for package errors."""


class SchemaError(MnarHmmError, KeyError):
    """A required covariate or column is absent."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericalDegeneracyError(MnarHmmError, FloatingPointError):
    """Total emission weight underflowed to zero at some time step."""

    def __init__(self, step, series_id=None):
        self.step = step
        self.series_id = series_id
        where = f" in series {series_id!r}" if series_id is not None else ""
        super().__init__(f"all states have zero weight at step {step}{where}")


class CapacityError(MnarHmmError):
    """Exhaustive enumeration would exceed the path budget."""


class DegenerateStateError(MnarHmmError):
    """A state received no posterior mass in an M-step."""


class RankError(MnarHmmError, ArithmeticError):
    """Weighted design matrix is singular even after ridging."""


class EstimationError(MnarHmmError):
    """Fitting failed; wraps the underlying cause."""


class InvalidConstraintError(MnarHmmError, ValueError):
    pass


class NestingError(MnarHmmError, ValueError):
    """Likelihood-ratio test requested for models that are not nested."""


class SingularInformationError(MnarHmmError, ArithmeticError):
    def __init__(self, message, null_space=()):
        self.null_space = tuple(null_space)
        super().__init__(message)


class DataFormatError(MnarHmmError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateRecordError(DataFormatError):
    pass
