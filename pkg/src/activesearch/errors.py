"""Exception hierarchy shared by every module."""


class ActiveSearchError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ActiveSearchError, ValueError):
    """A numeric parameter is outside its allowed range."""


class InvalidInputError(ActiveSearchError, ValueError):
    """Structurally invalid input (shape, length, partition...)."""


class NoTrainingDataError(ActiveSearchError):
    """The requested class has no ground truth in the training data."""


class EpisodeExhausted(ActiveSearchError):
    """Every proposal of the image has already been visited."""


class ValidationError(ActiveSearchError):
    """A file or record violates its schema."""

    def __init__(self, message, *, where=None, field=None):
        self.where = where
        self.field = field
        parts = []
        if where is not None:
            parts.append(str(where))
        if field is not None:
            parts.append(f"field '{field}'")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
