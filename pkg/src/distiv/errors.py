"""Exception hierarchy shared by the library and the CLI."""


class DivError(Exception):
    """Base class for all errors raised by distiv."""


class ConfigurationError(DivError, ValueError):
    """Invalid hyperparameters, unknown ids or wrong model kind."""


class ShapeError(DivError, ValueError):
    """Array shapes do not line up."""


class InputError(DivError, ValueError):
    """Data violates a precondition (non-finite, empty, constant column...)."""


class NumericalError(DivError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, value=None, epoch=None):
        super().__init__(message)
        self.value = value
        self.epoch = epoch


class DegenerateDesignError(DivError, ArithmeticError):
    """A regression design is (numerically) rank deficient."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ModelFormatError(DivError):
    """A serialized model file is malformed or has an unsupported version."""
