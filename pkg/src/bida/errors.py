"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and file
format problems exit 2, numeric failures exit 3.
"""


class BidaError(Exception):
    exit_code = 1


class ContractError(BidaError, ValueError):
    """An operation was called with arguments violating its preconditions."""

    exit_code = 1


class ConfigError(BidaError, ValueError):
    exit_code = 1


class DataError(BidaError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.offset = offset


class CompatibilityError(DataError):
    pass


class NumericError(BidaError, ArithmeticError):
    exit_code = 3


class OracleError(NumericError):
    """The finite-difference oracle saw a non-deterministic function."""
