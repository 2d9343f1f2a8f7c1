"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class FormatError(ValueError):
    """A serialized file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ArchiveError(FormatError):
    """A weight archive is structurally valid but incomplete or inconsistent."""


class StateError(RuntimeError):
    """An operation was called before its prerequisites were satisfied."""
