"""Failure taxonomy for the extraction pipeline."""

from __future__ import annotations


class AdapterError(Exception):
    """Base class so callers can catch everything the adapter raises."""


class BackendUnavailable(AdapterError):
    """The requested estimator backend cannot run (unknown name,
    missing dependency, or missing source data)."""


class FrameCountMismatch(AdapterError):
    """A frame is missing one of its required priors."""
