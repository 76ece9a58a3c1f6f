"""Shared exception types."""


class ShapeError(ValueError):
    """Image / tensor dimensions incompatible with the requested operation."""


class FormatError(ValueError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
