"""Exception types shared across the package."""


class FrameclError(Exception):
    """Base class for errors raised by this package."""


class UsageError(FrameclError, ValueError):
    """An API was called in a way its contract does not allow."""


class ConfigError(FrameclError, ValueError):
    """A configuration value is invalid."""


class DomainError(FrameclError, ValueError):
    """A computation was evaluated outside its mathematical domain."""


class ShapeError(UsageError):
    """Input shapes do not conform to a primitive's shape rules."""

    def __init__(self, kind, shapes, detail=""):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kind}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(FrameclError, ValueError):
    """A corpus, embedding, or vocabulary file failed validation."""
