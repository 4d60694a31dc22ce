class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a computed value."""


class FormatError(ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A run configuration is malformed."""
