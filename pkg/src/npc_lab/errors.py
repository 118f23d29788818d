"""Exception types shared across the package.

Each class carries the CLI exit code used when it escapes a command.
"""


class NpcError(Exception):
    exit_code = 3


class ContractViolation(NpcError, ValueError):
    """An operation was called outside its precondition."""


class ConfigurationError(NpcError, ValueError):
    exit_code = 2


class DataParseError(NpcError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(NpcError):
    pass


class InjectionError(NpcError):
    pass


class DegenerateInputError(NpcError):
    pass


class NumericFailure(NpcError, ArithmeticError):
    exit_code = 4
