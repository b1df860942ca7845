"""Exception types shared across the package."""


class C4Error(Exception):
    """Base class for errors raised by this package."""


class InputError(C4Error, ValueError):
    """Caller passed arguments that violate a precondition."""


class FormatError(C4Error, ValueError):
    """Serialized payload does not match the expected schema."""


class ParseError(FormatError):
    """Malformed line in a line-oriented file. Carries the line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class NumericalError(C4Error, RuntimeError):
    """An iterative routine failed to converge or lost required structure."""
