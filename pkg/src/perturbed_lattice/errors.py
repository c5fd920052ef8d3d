"""Exception taxonomy shared by all modules and mapped to CLI exit codes."""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError, ValueError):
    """Invalid parameters or violated preconditions."""

    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DomainError(ConfigError):
    """Argument outside the domain of a mathematical operation."""


class NumericalError(LabError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DegenerateDomainError(NumericalError):
    """Every grid point was removed by hard obstacles."""


class ResourceError(LabError, MemoryError):
    exit_code = 4
