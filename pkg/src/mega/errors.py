class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or diverged."""


class DataError(ValueError):
    """Malformed input data (e.g. a bad proposal-stream line)."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
