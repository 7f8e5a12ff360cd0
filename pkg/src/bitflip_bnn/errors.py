"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or byte stream does not conform to its declared format.

    Carries the byte offset at which parsing failed when that is known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(RuntimeError):
    """A numerical procedure failed to converge or produced an invalid state."""
