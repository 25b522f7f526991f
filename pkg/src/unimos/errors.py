"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    """Array or tensor has the wrong shape."""


class FormatError(ValidationError):
    """On-disk container is malformed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, stream: str = ""):
        super().__init__(message)
        self.stream = stream
