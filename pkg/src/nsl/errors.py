"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition on an argument was violated."""


class ConfigurationError(ValueError):
    """A network, predictor or run configuration cannot be realized."""


class StateError(RuntimeError):
    """An object is not in a state that permits the requested operation."""


class FormatError(ValueError):
    """A binary file does not follow its declared format."""


class EvaluationError(ArithmeticError):
    """A function under test returned a non-finite value."""

    def __init__(self, message, param=None, index=None):
        super().__init__(message)
        self.param = param
        self.index = index


class TrainingError(RuntimeError):
    """Training was aborted (non-finite loss, divergence)."""

    def __init__(self, message, iteration=None, stats=None):
        super().__init__(message)
        self.iteration = iteration
        self.stats = stats or {}
