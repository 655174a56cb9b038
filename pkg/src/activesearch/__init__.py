"""Context-guided active search over object proposals."""

__version__ = "0.1.0"

from .errors import (ActiveSearchError, EpisodeExhausted, InvalidInputError,  # noqa: E402
                     InvalidParameterError, NoTrainingDataError, ValidationError)
from .geometry import Displacement, Window, iou, iou_matrix, kernel  # noqa: E402

__all__ = [
    "ActiveSearchError", "Displacement", "EpisodeExhausted", "InvalidInputError",
    "InvalidParameterError", "NoTrainingDataError", "ValidationError", "Window", "iou",
    "iou_matrix", "kernel", "__version__",
]
