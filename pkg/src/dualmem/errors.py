"""Exception types shared by all modules.

Contract violations derive from :class:`ContractError` (CLI exit code 2);
file and parse problems are :class:`ParseError` or plain ``OSError``
(CLI exit code 3).
"""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class InvalidInputError(ContractError):
    pass


class ConflictError(ContractError):
    pass


class NotFoundError(ContractError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidComparisonError(ContractError):
    pass


class DegenerateGeometryError(ContractError):
    pass


class NonWatertightError(ContractError):
    pass


class ConstructionError(ContractError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values reached an update; the update was not applied."""


class ParseError(Exception):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
