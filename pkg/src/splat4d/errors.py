"""Exception types shared across the package.

Every contract violation raises one of these, so callers (and the CLI)
can name the failing contract instead of leaking bare ValueErrors.
"""


class Splat4DError(Exception):
    """Base class for all package errors."""


# --- tensor / file IO ---

class BadMagic(Splat4DError):
    """File does not start with the expected magic bytes."""


class DimMismatch(Splat4DError):
    """Declared dimensions disagree with the payload or with a peer array."""


class NonFiniteData(Splat4DError):
    """Array contains NaN or Inf where only finite values are allowed."""


# --- geometry ---

class BehindCamera(Splat4DError):
    """Point has non-positive camera-frame depth at projection time."""


class NonPositiveDepth(Splat4DError):
    """Unprojection or initialization requested with depth <= 0."""


# --- losses ---

class AllPixelsExcluded(Splat4DError):
    """Photometric loss has no pixels left after masking."""


class EmptyRegion(Splat4DError):
    """Depth loss region contains no pixels."""


class EmptyCluster(Splat4DError):
    """Flow loss has no usable points in the requested cluster."""


# --- sampling / clustering ---

class EmptySupport(Splat4DError):
    """Sampling map has no support to draw from."""


class DegenerateConfiguration(Splat4DError):
    """Too few or rank-deficient correspondences for model estimation."""


# --- apps / eval ---

class UnknownId(Splat4DError):
    """Requested Gaussian id does not exist in the checkpoint."""


class TooFewPoints(Splat4DError):
    """Fewer points than the operation needs (e.g. < 3 for a hull)."""


class LengthMismatch(Splat4DError):
    """Two trajectories do not cover the same frame indices."""


# --- oracle / adapter-facing ---

class SpecInvalid(Splat4DError):
    """Synthetic scene spec fails validation."""
