"""Exception hierarchy shared by every subpackage."""


class GraphRelError(Exception):
    """Base class for all errors raised by graphrel."""


class DimensionError(GraphRelError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(GraphRelError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ParameterError(GraphRelError, ValueError):
    """A scalar hyperparameter is out of its allowed range."""


class ContractError(GraphRelError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(GraphRelError, ValueError):
    """A configuration value is invalid or inconsistent with the data."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class IngestionError(GraphRelError, OSError):
    """A dataset could not be read from disk."""


class FormatError(IngestionError):
    """A dataset file is malformed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class DivergenceError(GraphRelError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
