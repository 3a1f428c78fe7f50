"""Prior extraction for real videos: depth/flow/intrinsics estimator
outputs re-emitted in the reconstruction engine's dataset layout."""

from .backends import Frame, PassthroughBackend, get_backend
from .errors import AdapterError, BackendUnavailable, FrameCountMismatch
from .extract import extract

__all__ = ["AdapterError", "BackendUnavailable", "Frame",
           "FrameCountMismatch", "PassthroughBackend", "extract",
           "get_backend"]
