"""Exception types shared across the package."""


class EvpoiError(Exception):
    """Base class for package errors."""


class DataValidationError(EvpoiError, ValueError):
    """Input data failed validation; ``errors`` holds one message per problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid input")


class DegenerateDataError(EvpoiError, ValueError):
    pass


class ParameterError(EvpoiError, ValueError):
    pass


class NumericalError(EvpoiError, ArithmeticError):
    pass


class StateError(EvpoiError, RuntimeError):
    pass


class TrainingError(EvpoiError, RuntimeError):
    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class ArtifactError(EvpoiError, ValueError):
    """A saved model or bundle could not be read (bad format or version)."""
