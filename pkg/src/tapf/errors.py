"""Exception types shared across the package."""


class TapfError(Exception):
    pass


class DimensionError(TapfError, ValueError):
    pass


class ContractError(TapfError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(TapfError, ValueError):
    pass


class NumericError(TapfError, FloatingPointError):
    pass


class FormatError(TapfError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
