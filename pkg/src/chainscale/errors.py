"""Exception hierarchy shared by every chainscale module."""


class ChainscaleError(Exception):
    """Base class for all package errors."""


class TraceParseError(ChainscaleError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyTraceError(ChainscaleError, ValueError):
    pass


class DomainError(ChainscaleError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigurationError(ChainscaleError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class TrainingError(ChainscaleError, ValueError):
    pass


class CyclicGraphError(ChainscaleError, ValueError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("call graph contains a cycle: " + " -> ".join(map(str, self.cycle)))


class ActionSpaceTooLargeError(ChainscaleError, ValueError):
    pass


class NumericError(ChainscaleError, ArithmeticError):
    pass
